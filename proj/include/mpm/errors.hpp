#pragma once

#include <stdexcept>
#include <string>

namespace mpm {

// I/O failures (missing files, unreadable streams). CLI maps these to exit 2.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite loss during training. CLI maps these to exit 3.
struct DivergenceError : std::runtime_error {
    DivergenceError(const std::string& msg, int epoch_, int batch_)
        : std::runtime_error(msg), epoch(epoch_), batch(batch_) {}
    int epoch;
    int batch;
};

}  // namespace mpm
