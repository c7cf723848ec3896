#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cmtrace {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A caller-supplied value violates a documented precondition.
class InvalidArgument : public Error {
public:
    using Error::Error;
};

// An index (token id, position, layer, label) is out of range. The offending
// value is kept so callers can report it.
class IndexError : public Error {
public:
    IndexError(const std::string& what, std::size_t index)
        : Error(what + " (index " + std::to_string(index) + ")"), index_(index) {}

    std::size_t index() const noexcept { return index_; }

private:
    std::size_t index_;
};

// A file could not be parsed or fails validation.
class FormatError : public Error {
public:
    using Error::Error;
};

// No monotone alignment of N labels into T frames exists.
class InfeasibleAlignment : public Error {
public:
    InfeasibleAlignment(std::size_t frames, std::size_t labels)
        : Error("infeasible alignment: " + std::to_string(labels) + " transcript labels cannot fit in " +
                std::to_string(frames) + " frames (T=" + std::to_string(frames) + ", N=" +
                std::to_string(labels) + ")"),
          frames_(frames),
          labels_(labels) {}

    std::size_t frames() const noexcept { return frames_; }
    std::size_t labels() const noexcept { return labels_; }

private:
    std::size_t frames_;
    std::size_t labels_;
};

}  // namespace cmtrace
