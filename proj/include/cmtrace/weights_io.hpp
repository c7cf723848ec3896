#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "cmtrace/model.hpp"

namespace cmtrace {

// Weight file layout:
//
//   cmtrace-weights 1
//   <key> <value...>          one line per config field and vocab range
//   text_words <n> w0 w1 ...  optional tokenizer word table
//   tensor_bytes <bytes>
//   end_header
//   <raw little-endian float64 tensors, row-major>
//
// Tensor order: token_embedding, position_embedding, then per layer
// attn_norm, wq, wk, wv, wo, mlp_norm, w_in, b_in, w_out, b_out, then
// final_norm, unembedding.
struct ModelBundle {
    Model model;
    std::vector<std::string> text_words;
};

void save_model(std::ostream& out, const Model& model, const std::vector<std::string>& text_words = {});
void save_model(const std::filesystem::path& path, const Model& model,
                const std::vector<std::string>& text_words = {});

ModelBundle load_model(std::istream& in);
ModelBundle load_model(const std::filesystem::path& path);

// Byte count of the tensor payload implied by a config.
std::size_t tensor_payload_bytes(const ModelConfig& config);

}  // namespace cmtrace
