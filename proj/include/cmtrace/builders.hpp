#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "cmtrace/model.hpp"

namespace cmtrace {

// Gaussian weights drawn from a generator seeded with config.rng_seed; the same
// seed always gives bit-identical weights.
Model build_random_model(const ModelConfig& config);

struct PlantedFact {
    TokenId subject = 0;
    TokenId object = 0;
};

struct PlantedFactOptions {
    VocabLayout vocab;
    std::size_t n_layers = 4;
    std::size_t template_len = 6;   // prompt length including the leading marker
    std::size_t subject_index = 4;  // position of the subject token in every prompt
    std::size_t store_layer = 1;    // layer whose MLP stores the association
    std::size_t extra_positions = 16;  // max_positions = template_len + extra_positions
    double object_gain = 8.0;       // strength of the object direction written by the MLP
    double logit_scale = 4.0;
};

struct PlantedFactModel {
    Model model;
    ComponentRef expected_site;
    std::size_t copy_layer;  // attention layer moving the subject residual to the last position
};

// Hand-set weights realizing a key-value memory:
//
//  * the residual stream holds a one-hot token block followed by a one-hot
//    position block (tied embeddings);
//  * the MLP at store_layer has one ReLU unit per fact that fires only when
//    the fact's subject sits at subject_index, writing the object's
//    unembedding direction;
//  * the attention at store_layer + 1 copies the token block of the subject
//    position into the final position (query/key read position features only);
//  * every other attention and MLP has zero output weights.
PlantedFactModel build_planted_fact_model(const std::vector<PlantedFact>& facts, const PlantedFactOptions& options);

}  // namespace cmtrace
