#pragma once

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "imsty/data.hpp"
#include "imsty/model.hpp"
#include "imsty/tensor.hpp"

namespace imsty {

struct MetricRecord {
    std::string name;
    double value = 0.0;
    std::size_t samples = 0;
    int epoch = 0;
};

/// Overall accuracy, no class balancing.
inline double accuracy(const std::vector<int>& pred, const std::vector<int>& truth) {
    if (pred.size() != truth.size()) {
        throw std::invalid_argument("accuracy: " + std::to_string(pred.size()) + " predictions vs " +
                                    std::to_string(truth.size()) + " labels");
    }
    if (pred.empty()) throw std::invalid_argument("accuracy: empty inputs");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] == truth[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(pred.size());
}

/// Fraction of valid joints whose Euclidean error is within
/// threshold_frac * image_size (inclusive). Coordinates are image pixels.
inline double pck(const Tensor& pred_kps, const Tensor& true_kps, std::size_t image_size,
                  double threshold_frac, const Tensor* valid = nullptr) {
    if (pred_kps.shape() != true_kps.shape() || pred_kps.rank() != 3 || pred_kps.dim(2) != 2) {
        throw std::invalid_argument("pck: keypoint tensors must share shape [N, J, 2]; got " +
                                    detail::shape_str(pred_kps.shape()) + " and " +
                                    detail::shape_str(true_kps.shape()));
    }
    if (threshold_frac <= 0.0) throw std::invalid_argument("pck: threshold must be positive");
    const std::size_t N = pred_kps.dim(0), J = pred_kps.dim(1);
    const double thr = threshold_frac * static_cast<double>(image_size);
    std::size_t total = 0, correct = 0;
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t j = 0; j < J; ++j) {
            if (valid && (*valid)(n, j) == 0.0) continue;
            ++total;
            const double dr = pred_kps(n, j, 0) - true_kps(n, j, 0);
            const double dc = pred_kps(n, j, 1) - true_kps(n, j, 1);
            if (std::sqrt(dr * dr + dc * dc) <= thr) ++correct;
        }
    }
    if (total == 0) throw std::invalid_argument("pck: no valid joints to evaluate");
    return static_cast<double>(correct) / static_cast<double>(total);
}

/// Per-joint PCK plus the "All" aggregate, for the evaluation table.
inline std::vector<double> pck_per_joint(const Tensor& pred_kps, const Tensor& true_kps,
                                         std::size_t image_size, double threshold_frac) {
    const std::size_t N = pred_kps.dim(0), J = pred_kps.dim(1);
    const double thr = threshold_frac * static_cast<double>(image_size);
    std::vector<double> out;
    std::size_t all_correct = 0;
    for (std::size_t j = 0; j < J; ++j) {
        std::size_t correct = 0;
        for (std::size_t n = 0; n < N; ++n) {
            const double dr = pred_kps(n, j, 0) - true_kps(n, j, 0);
            const double dc = pred_kps(n, j, 1) - true_kps(n, j, 1);
            if (std::sqrt(dr * dr + dc * dc) <= thr) ++correct;
        }
        all_correct += correct;
        out.push_back(static_cast<double>(correct) / static_cast<double>(N));
    }
    out.push_back(static_cast<double>(all_correct) / static_cast<double>(N * J));
    return out;
}

/// Writes tap features for every sample of the given datasets as CSV:
/// sample_id, domain, label, then the feature columns (channel means by
/// default, the full flattened tap with full_resolution=true).
inline void export_features(Model& model, const std::vector<const Dataset*>& datasets,
                            const std::string& path, bool full_resolution = false,
                            std::size_t batch_size = 32) {
    std::ostringstream os;
    os << std::setprecision(12);
    const ActShape tap = model.tap_shape();
    const std::size_t feat_cols = full_resolution ? tap.c * tap.h * tap.w : tap.c;
    os << "sample_id,domain,label";
    for (std::size_t i = 0; i < feat_cols; ++i) os << ",f" << i;
    os << "\n";
    NoGradScope ng;
    for (const Dataset* ds : datasets) {
        for (std::size_t start = 0; start < ds->size(); start += batch_size) {
            std::vector<std::size_t> idx;
            for (std::size_t i = start; i < std::min(ds->size(), start + batch_size); ++i) idx.push_back(i);
            DomainBatch b = make_batch(*ds, idx, false);
            Tensor f = model.forward_to_tap(b.images, false);
            const std::size_t HW = f.dim(2) * f.dim(3);
            for (std::size_t n = 0; n < idx.size(); ++n) {
                os << ds->ids[idx[n]] << "," << domain_name(ds->domain) << ",";
                if (!ds->labels.empty()) {
                    os << ds->labels[idx[n]];
                } else {
                    os << -1;
                }
                if (full_resolution) {
                    for (std::size_t c = 0; c < f.dim(1); ++c) {
                        for (std::size_t i = 0; i < HW; ++i) {
                            os << "," << f.ptr()[(n * f.dim(1) + c) * HW + i];
                        }
                    }
                } else {
                    for (std::size_t c = 0; c < f.dim(1); ++c) {
                        double mean = 0.0;
                        const double* row = f.ptr() + (n * f.dim(1) + c) * HW;
                        for (std::size_t i = 0; i < HW; ++i) mean += row[i];
                        os << "," << mean / static_cast<double>(HW);
                    }
                }
                os << "\n";
            }
        }
    }
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("export_features: cannot write '" + path + "'");
    f << os.str();
}

}  // namespace imsty
