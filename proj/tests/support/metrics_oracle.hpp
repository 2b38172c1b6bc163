#pragma once

#include <cmath>
#include <vector>

#include "cuedepth/tensor.hpp"

// Deliberately naive re-derivation of the six evaluation metrics,
// written from the formulas alone. Collects masked pixels into plain
// vectors first, then computes each metric independently.
namespace testsupport {

struct NaiveMetrics {
    double abs_rel, sq_rel, rms, rms_log, delta1, delta2, delta3;
    std::size_t T;
};

inline NaiveMetrics naive_metrics(const cuedepth::Tensor& pred, const cuedepth::Tensor& gt,
                                  const cuedepth::Tensor& mask) {
    std::vector<double> y, ys;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        if (mask[i] != 0.0) {
            y.push_back(pred[i]);
            ys.push_back(gt[i]);
        }
    }
    const double T = static_cast<double>(y.size());
    NaiveMetrics m{};
    m.T = y.size();
    for (std::size_t i = 0; i < y.size(); ++i) m.abs_rel += std::abs(y[i] - ys[i]) / ys[i];
    m.abs_rel /= T;
    for (std::size_t i = 0; i < y.size(); ++i) m.sq_rel += (y[i] - ys[i]) * (y[i] - ys[i]) / ys[i];
    m.sq_rel /= T;
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += (y[i] - ys[i]) * (y[i] - ys[i]);
    m.rms = std::sqrt(acc / T);
    acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double g = std::log(y[i]) - std::log(ys[i]);
        acc += g * g;
    }
    m.rms_log = std::sqrt(acc / T);
    for (int n = 1; n <= 3; ++n) {
        double hits = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            const double ratio = y[i] > ys[i] ? y[i] / ys[i] : ys[i] / y[i];
            if (ratio < std::pow(1.25, n)) hits += 1.0;
        }
        (n == 1 ? m.delta1 : n == 2 ? m.delta2 : m.delta3) = hits / T;
    }
    return m;
}

} // namespace testsupport
