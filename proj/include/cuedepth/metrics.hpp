#pragma once

#include <cmath>
#include <cstddef>
#include <iomanip>
#include <sstream>
#include <string>

#include "cuedepth/error.hpp"
#include "cuedepth/tensor.hpp"

#include "nlohmann/json.hpp"

namespace cuedepth {

/// The six depth evaluation metrics over one masked pixel set.
struct MetricsReport {
    double abs_rel = 0.0;
    double sq_rel = 0.0;
    double rms = 0.0;
    double rms_log = 0.0;
    double delta1 = 0.0;
    double delta2 = 0.0;
    double delta3 = 0.0;
    std::size_t T = 0;

    nlohmann::json to_json() const {
        return {{"abs_rel", abs_rel}, {"sq_rel", sq_rel}, {"rms", rms},     {"rms_log", rms_log},
                {"delta1", delta1},  {"delta2", delta2}, {"delta3", delta3}, {"T", T}};
    }
    static MetricsReport from_json(const nlohmann::json& j) {
        MetricsReport r;
        r.abs_rel = j.at("abs_rel");
        r.sq_rel = j.at("sq_rel");
        r.rms = j.at("rms");
        r.rms_log = j.at("rms_log");
        r.delta1 = j.at("delta1");
        r.delta2 = j.at("delta2");
        r.delta3 = j.at("delta3");
        r.T = j.at("T");
        return r;
    }

    static std::string csv_header() { return "abs_rel,sq_rel,rms,rms_log,delta1,delta2,delta3,T"; }
    std::string csv_row() const {
        std::ostringstream os;
        os << std::setprecision(17) << abs_rel << ',' << sq_rel << ',' << rms << ',' << rms_log << ','
           << delta1 << ',' << delta2 << ',' << delta3 << ',' << T;
        return os.str();
    }
};

namespace detail {

// shared walk over the masked pixels, with the domain checks every
// metric needs
template <typename Fn>
void masked_walk(const Tensor& pred, const Tensor& gt, const Tensor& mask, bool need_pos_pred,
                 const char* op, Fn&& fn) {
    check_same_shape(pred, gt, op);
    check_same_shape(pred, mask, op);
    std::size_t count = 0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        if (mask[i] == 0.0) continue;
        if (gt[i] <= 0.0) {
            throw DomainError(std::string(op) + ": non-positive ground truth " + std::to_string(gt[i]) +
                              " inside mask at flat index " + std::to_string(i));
        }
        if (need_pos_pred && pred[i] <= 0.0) {
            throw DomainError(std::string(op) + ": non-positive prediction " + std::to_string(pred[i]) +
                              " inside mask at flat index " + std::to_string(i));
        }
        fn(pred[i], gt[i]);
        ++count;
    }
    if (count == 0) throw DegenerateInputError(std::string(op) + ": empty mask");
}

inline std::size_t mask_count(const Tensor& mask) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < mask.numel(); ++i)
        if (mask[i] != 0.0) ++n;
    return n;
}

} // namespace detail

inline double abs_rel(const Tensor& pred, const Tensor& gt, const Tensor& mask) {
    double acc = 0.0;
    std::size_t n = 0;
    detail::masked_walk(pred, gt, mask, false, "abs_rel", [&](double y, double ys) {
        acc += std::abs(y - ys) / ys;
        ++n;
    });
    return acc / static_cast<double>(n);
}

inline double sq_rel(const Tensor& pred, const Tensor& gt, const Tensor& mask) {
    double acc = 0.0;
    std::size_t n = 0;
    detail::masked_walk(pred, gt, mask, false, "sq_rel", [&](double y, double ys) {
        acc += (y - ys) * (y - ys) / ys;
        ++n;
    });
    return acc / static_cast<double>(n);
}

inline double rms(const Tensor& pred, const Tensor& gt, const Tensor& mask) {
    double acc = 0.0;
    std::size_t n = 0;
    detail::masked_walk(pred, gt, mask, false, "rms", [&](double y, double ys) {
        acc += (y - ys) * (y - ys);
        ++n;
    });
    return std::sqrt(acc / static_cast<double>(n));
}

inline double rms_log(const Tensor& pred, const Tensor& gt, const Tensor& mask) {
    double acc = 0.0;
    std::size_t n = 0;
    detail::masked_walk(pred, gt, mask, true, "rms_log", [&](double y, double ys) {
        const double g = std::log(y) - std::log(ys);
        acc += g * g;
        ++n;
    });
    return std::sqrt(acc / static_cast<double>(n));
}

/// Fraction of masked pixels with max(y/y*, y*/y) < 1.25^n, strict.
inline double delta_acc(const Tensor& pred, const Tensor& gt, const Tensor& mask, int n) {
    if (n < 1 || n > 3) throw ContractError("delta_acc: n must be 1, 2 or 3");
    const double thr = std::pow(1.25, n);
    std::size_t hits = 0, total = 0;
    detail::masked_walk(pred, gt, mask, true, "delta_acc", [&](double y, double ys) {
        const double ratio = std::max(y / ys, ys / y);
        if (ratio < thr) ++hits;
        ++total;
    });
    return static_cast<double>(hits) / static_cast<double>(total);
}

inline MetricsReport evaluate(const Tensor& pred, const Tensor& gt, const Tensor& mask) {
    MetricsReport r;
    r.abs_rel = abs_rel(pred, gt, mask);
    r.sq_rel = sq_rel(pred, gt, mask);
    r.rms = rms(pred, gt, mask);
    r.rms_log = rms_log(pred, gt, mask);
    r.delta1 = delta_acc(pred, gt, mask, 1);
    r.delta2 = delta_acc(pred, gt, mask, 2);
    r.delta3 = delta_acc(pred, gt, mask, 3);
    r.T = detail::mask_count(mask);
    return r;
}

/// evaluate over all pixels (mask of ones).
inline MetricsReport evaluate(const Tensor& pred, const Tensor& gt) {
    return evaluate(pred, gt, Tensor::full(pred.shape(), 1.0));
}

} // namespace cuedepth
