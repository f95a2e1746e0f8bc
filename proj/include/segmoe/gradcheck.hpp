#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "segmoe/tensor.hpp"

namespace segmoe {

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
    bool ok = true;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_error = 0.0;
    bool ok = true;
};

struct GradCheckOptions {
    double step = 1e-5;
    double tol = 1e-4;
    // Denominator floor: |a - n| / max(|a|, |n|, floor).
    double floor = 1e-6;
    // 0 checks every entry; otherwise a seeded random subset per input.
    std::size_t max_entries = 0;
    unsigned seed = 7;
};

/// Compares reverse-mode gradients of the scalar `loss` against central
/// finite differences for every named input. `loss` must read the inputs'
/// current values on each call. Throws std::runtime_error on a non-finite loss.
GradCheckReport check_gradients(const std::function<Tensor()>& loss,
                                std::vector<std::pair<std::string, Tensor>> inputs,
                                const GradCheckOptions& options = {});

}  // namespace segmoe
