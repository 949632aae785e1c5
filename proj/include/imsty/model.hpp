#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "imsty/checkpoint.hpp"
#include "imsty/graph.hpp"
#include "imsty/ops.hpp"
#include "imsty/rng.hpp"
#include "imsty/tensor.hpp"

namespace imsty {

// ---------------------------------------------------------------------------
// Graph builders
// ---------------------------------------------------------------------------

/// conv(5x5,6)-BN-ReLU-pool2-conv(5x5,16)-BN-ReLU-pool2, alignment tap after
/// the final pooling, then flatten. For a 32x32 input the tap is 16x5x5.
inline LayerGraph build_lenet5_encoder(int in_channels) {
    if (in_channels != 1 && in_channels != 3) {
        throw std::invalid_argument("build_lenet5_encoder: in_channels must be 1 or 3");
    }
    LayerGraph g;
    g.layers.push_back({LayerKind::input, 0, 0, 1, 0, in_channels, 0});
    g.layers.push_back({LayerKind::conv, 6, 5, 1, 0, 0, 0});
    g.layers.push_back({LayerKind::bn});
    g.layers.push_back({LayerKind::relu});
    g.layers.push_back({LayerKind::maxpool, 0, 2, 1, 0, 0, 0});
    g.layers.push_back({LayerKind::conv, 16, 5, 1, 0, 0, 0});
    g.layers.push_back({LayerKind::bn});
    g.layers.push_back({LayerKind::relu});
    g.layers.push_back({LayerKind::maxpool, 0, 2, 1, 0, 0, 0});
    g.layers.push_back({LayerKind::imsty});
    g.layers.push_back({LayerKind::flatten});
    return g;
}

/// fc(120)-ReLU-fc(84)-ReLU-fc(C), producing logits.
inline LayerGraph build_classifier_head(int feature_dim, int num_classes) {
    if (feature_dim < 1 || num_classes < 1) {
        throw std::invalid_argument("build_classifier_head: feature_dim and num_classes must be >= 1");
    }
    LayerGraph g;
    g.layers.push_back({LayerKind::input, 0, 0, 1, 0, 0, feature_dim});
    g.layers.push_back({LayerKind::linear, 120});
    g.layers.push_back({LayerKind::relu});
    g.layers.push_back({LayerKind::linear, 84});
    g.layers.push_back({LayerKind::relu});
    g.layers.push_back({LayerKind::linear, num_classes});
    return g;
}

/// Full classification model for a given input resolution.
inline LayerGraph build_lenet5_classifier(int in_channels, int num_classes, std::size_t input_size) {
    LayerGraph enc = build_lenet5_encoder(in_channels);
    const WalkedGraph wenc = shape_check(enc, input_size, input_size);
    const int feat = static_cast<int>(wenc.output_shape.features);
    return concat_graphs(enc, build_classifier_head(feat, num_classes));
}

/// Four strided conv-BN-ReLU stages (x16 downsample) with the alignment tap
/// at the encoder output, then exactly three tconv-BN-ReLU upsampling blocks
/// and a 1x1 conv to the joint heatmaps. Output resolution is input/2.
inline LayerGraph build_pose_model(int in_channels, int joints, int width) {
    if (joints < 1) throw std::invalid_argument("build_pose_model: joints must be >= 1");
    if (width < 8) throw std::invalid_argument("build_pose_model: width must be >= 8");
    const int stage_channels[4] = {std::max(4, width / 4), std::max(4, width / 2), width, width};
    LayerGraph g;
    g.layers.push_back({LayerKind::input, 0, 0, 1, 0, in_channels, 0});
    for (int s = 0; s < 4; ++s) {
        g.layers.push_back({LayerKind::conv, stage_channels[s], 3, 2, 1, 0, 0});
        g.layers.push_back({LayerKind::bn});
        g.layers.push_back({LayerKind::relu});
    }
    g.layers.push_back({LayerKind::imsty});
    for (int s = 0; s < 3; ++s) {
        g.layers.push_back({LayerKind::tconv, width, 2, 2, 0, 0, 0});
        g.layers.push_back({LayerKind::bn});
        g.layers.push_back({LayerKind::relu});
    }
    g.layers.push_back({LayerKind::conv, joints, 1, 1, 0, 0, 0});
    return g;
}

// ---------------------------------------------------------------------------
// Model: a layer graph bound to parameters and batch-norm buffers
// ---------------------------------------------------------------------------

class Model {
public:
    Model() = default;

    Model(const LayerGraph& graph, std::size_t input_h, std::size_t input_w, std::uint64_t seed)
        : wg_(shape_check(graph, input_h, input_w)) {
        init_params(seed);
    }

    const WalkedGraph& walked() const { return wg_; }
    LayerGraph graph() const {
        LayerGraph g;
        for (const WalkedLayer& wl : wg_.layers) g.layers.push_back(wl.desc);
        return g;
    }
    int tap_index() const { return wg_.tap_index; }
    ActShape tap_shape() const {
        if (wg_.tap_index < 0) throw std::logic_error("Model: graph has no alignment tap");
        return wg_.layers[static_cast<std::size_t>(wg_.tap_index)].out_shape;
    }
    ActShape output_shape() const { return wg_.output_shape; }
    ActShape input_shape() const { return wg_.input_shape; }

    std::vector<Tensor>& parameters() { return params_; }
    const std::vector<Tensor>& parameters() const { return params_; }
    const std::vector<std::string>& parameter_names() const { return param_names_; }
    std::vector<Tensor>& buffers() { return buffers_; }
    const std::vector<std::string>& buffer_names() const { return buffer_names_; }

    void set_requires_grad(bool v) {
        for (Tensor& p : params_) p.set_requires_grad(v);
    }

    /// Structural deep copy (teacher construction, snapshots).
    Model clone(bool requires_grad) const {
        Model m;
        m.wg_ = wg_;
        m.layer_params_ = layer_params_;
        m.layer_buffers_ = layer_buffers_;
        m.param_names_ = param_names_;
        m.buffer_names_ = buffer_names_;
        for (const Tensor& p : params_) {
            Tensor c = p.detach();
            c.set_requires_grad(requires_grad);
            m.params_.push_back(c);
        }
        for (const Tensor& b : buffers_) m.buffers_.push_back(b.detach());
        return m;
    }

    /// Full forward pass.
    Tensor forward(const Tensor& x, bool train, bool update_running = true) {
        return run(x, 0, wg_.layers.size(), train, update_running);
    }

    /// Forward up to and including the alignment tap (the tap itself is
    /// identity); returns the tap activation.
    Tensor forward_to_tap(const Tensor& x, bool train, bool update_running = true) {
        if (wg_.tap_index < 0) throw std::logic_error("Model: graph has no alignment tap");
        return run(x, 0, static_cast<std::size_t>(wg_.tap_index) + 1, train, update_running);
    }

    /// Forward from just after the alignment tap to the output.
    Tensor forward_from_tap(const Tensor& tap, bool train, bool update_running = true) {
        if (wg_.tap_index < 0) throw std::logic_error("Model: graph has no alignment tap");
        return run(tap, static_cast<std::size_t>(wg_.tap_index) + 1, wg_.layers.size(), train,
                   update_running);
    }

    std::vector<NamedTensor> named_tensors() const {
        std::vector<NamedTensor> out;
        for (std::size_t i = 0; i < params_.size(); ++i) out.push_back({param_names_[i], params_[i]});
        for (std::size_t i = 0; i < buffers_.size(); ++i) out.push_back({buffer_names_[i], buffers_[i]});
        return out;
    }

    /// Loads parameters and buffers by name; shapes must match.
    void load_state(const std::vector<NamedTensor>& items, const std::string& prefix = "") {
        std::map<std::string, const Tensor*> by_name;
        for (const NamedTensor& it : items) by_name[it.name] = &it.tensor;
        auto fill = [&](std::vector<Tensor>& dst, const std::vector<std::string>& names) {
            for (std::size_t i = 0; i < dst.size(); ++i) {
                auto it = by_name.find(prefix + names[i]);
                if (it == by_name.end()) {
                    throw std::runtime_error("load_state: missing tensor '" + prefix + names[i] + "'");
                }
                if (it->second->shape() != dst[i].shape()) {
                    throw std::runtime_error("load_state: shape mismatch for '" + prefix + names[i] +
                                             "': checkpoint " + detail::shape_str(it->second->shape()) +
                                             " vs model " + detail::shape_str(dst[i].shape()));
                }
                dst[i].raw() = it->second->raw();
            }
        };
        fill(params_, param_names_);
        fill(buffers_, buffer_names_);
    }

private:
    struct LayerSlots {
        int weight = -1, bias = -1;      // param indices
        int run_mean = -1, run_var = -1; // buffer indices
    };

    void init_params(std::uint64_t seed) {
        for (std::size_t i = 0; i < wg_.layers.size(); ++i) {
            const WalkedLayer& wl = wg_.layers[i];
            LayerSlots slots;
            const std::string lname = "l" + std::to_string(i) + "." + layer_kind_name(wl.desc.kind);
            switch (wl.desc.kind) {
                case LayerKind::conv:
                case LayerKind::tconv: {
                    const auto& ws = wl.param_shapes[0];
                    const std::size_t fan_in = (wl.desc.kind == LayerKind::conv)
                                                   ? ws[1] * ws[2] * ws[3]
                                                   : ws[0] * ws[2] * ws[3];
                    slots.weight = add_param(lname + ".weight", ws,
                                             he_uniform(ws, fan_in, mix_seed(seed, i, 0)));
                    slots.bias = add_param(lname + ".bias", wl.param_shapes[1], {});
                    break;
                }
                case LayerKind::linear: {
                    const auto& ws = wl.param_shapes[0];
                    slots.weight = add_param(lname + ".weight", ws,
                                             he_uniform(ws, ws[1], mix_seed(seed, i, 0)));
                    slots.bias = add_param(lname + ".bias", wl.param_shapes[1], {});
                    break;
                }
                case LayerKind::bn: {
                    slots.weight = add_param(lname + ".weight", wl.param_shapes[0], {}, 1.0);
                    slots.bias = add_param(lname + ".bias", wl.param_shapes[1], {});
                    slots.run_mean = add_buffer(lname + ".running_mean", wl.param_shapes[0], 0.0);
                    slots.run_var = add_buffer(lname + ".running_var", wl.param_shapes[0], 1.0);
                    break;
                }
                default:
                    break;
            }
            layer_params_.push_back(slots);
            (void)layer_buffers_;
        }
    }

    static std::vector<double> he_uniform(const std::vector<std::size_t>& shape, std::size_t fan_in,
                                          std::uint64_t seed) {
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        Rng rng(seed);
        std::vector<double> v(detail::shape_numel(shape));
        for (double& x : v) x = rng.uniform(-bound, bound);
        return v;
    }

    int add_param(const std::string& name, const std::vector<std::size_t>& shape,
                  std::vector<double> values, double fill = 0.0) {
        Tensor t = values.empty() ? Tensor(shape, fill) : Tensor::from_data(shape, std::move(values));
        t.set_requires_grad(true);
        params_.push_back(t);
        param_names_.push_back(name);
        return static_cast<int>(params_.size()) - 1;
    }

    int add_buffer(const std::string& name, const std::vector<std::size_t>& shape, double fill) {
        buffers_.push_back(Tensor(shape, fill));
        buffer_names_.push_back(name);
        return static_cast<int>(buffers_.size()) - 1;
    }

    Tensor run(const Tensor& x, std::size_t from, std::size_t to, bool train, bool update_running) {
        check_entry_shape(x, from);
        Tensor cur = x;
        for (std::size_t i = from; i < to; ++i) {
            const WalkedLayer& wl = wg_.layers[i];
            const LayerSlots& slots = layer_params_[i];
            switch (wl.desc.kind) {
                case LayerKind::input:
                    break;
                case LayerKind::conv:
                    cur = add_channel(conv2d(cur, params_[slots.weight], wl.desc.stride, wl.desc.padding),
                                      params_[slots.bias]);
                    break;
                case LayerKind::tconv:
                    cur = add_channel(
                        transpose_conv2d(cur, params_[slots.weight], wl.desc.stride, wl.desc.padding),
                        params_[slots.bias]);
                    break;
                case LayerKind::bn:
                    cur = batch_norm2d(cur, params_[slots.weight], params_[slots.bias],
                                       buffers_[slots.run_mean], buffers_[slots.run_var], train, 0.1,
                                       1e-5, update_running && train);
                    break;
                case LayerKind::relu:
                    cur = relu(cur);
                    break;
                case LayerKind::maxpool:
                    cur = max_pool2d(cur, wl.desc.kernel);
                    break;
                case LayerKind::flatten:
                    cur = flatten(cur);
                    break;
                case LayerKind::linear:
                    cur = linear(cur, params_[slots.weight], params_[slots.bias]);
                    break;
                case LayerKind::imsty:
                    break;  // identity inside a plain forward; the trainer injects here
            }
        }
        return cur;
    }

    void check_entry_shape(const Tensor& x, std::size_t from) const {
        const ActShape expect = from == 0 ? wg_.input_shape
                                          : wg_.layers[from - 1].out_shape;
        bool ok;
        if (expect.spatial) {
            ok = x.rank() == 4 && x.dim(1) == expect.c && x.dim(2) == expect.h && x.dim(3) == expect.w;
        } else {
            ok = x.rank() == 2 && x.dim(1) == expect.features;
        }
        if (!ok) {
            throw std::invalid_argument("Model::forward: input " + detail::shape_str(x.shape()) +
                                        " does not match expected activation " + expect.str());
        }
    }

    WalkedGraph wg_;
    std::vector<LayerSlots> layer_params_;
    std::vector<int> layer_buffers_;
    std::vector<Tensor> params_;
    std::vector<std::string> param_names_;
    std::vector<Tensor> buffers_;
    std::vector<std::string> buffer_names_;
};

// ---------------------------------------------------------------------------
// Heatmap helpers
// ---------------------------------------------------------------------------

// Coordinate mapping between image space and heatmap space uses half-pixel
// centers: x_hm = (x_img + 0.5) / ratio - 0.5.
inline double image_to_heatmap(double x_img, double ratio) { return (x_img + 0.5) / ratio - 0.5; }
inline double heatmap_to_image(double x_hm, double ratio) { return (x_hm + 0.5) * ratio - 0.5; }

/// Renders unnormalized Gaussians (peak 1) at the given heatmap-space
/// keypoints. keypoints is [N, J, 2] as (row, col); joints with a zero entry
/// in valid (if provided, [N, J]) render as all-zero maps.
inline Tensor render_gaussian_heatmaps(const Tensor& keypoints_hm, std::size_t h, std::size_t w,
                                       double sigma, const Tensor* valid = nullptr) {
    if (keypoints_hm.rank() != 3 || keypoints_hm.dim(2) != 2) {
        throw std::invalid_argument("render_gaussian_heatmaps: keypoints must be [N, J, 2], got " +
                                    detail::shape_str(keypoints_hm.shape()));
    }
    const std::size_t N = keypoints_hm.dim(0), J = keypoints_hm.dim(1);
    Tensor maps({N, J, h, w});
    const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t j = 0; j < J; ++j) {
            if (valid && (*valid)(n, j) == 0.0) continue;
            const double kr = keypoints_hm(n, j, 0);
            const double kc = keypoints_hm(n, j, 1);
            for (std::size_t r = 0; r < h; ++r) {
                const double dr = static_cast<double>(r) - kr;
                for (std::size_t c = 0; c < w; ++c) {
                    const double dc = static_cast<double>(c) - kc;
                    maps(n, j, r, c) = std::exp(-(dr * dr + dc * dc) * inv2s2);
                }
            }
        }
    }
    return maps;
}

/// Per-joint argmax (row, col) in heatmap pixels; ties break to the lowest
/// flat index. Result is [N, J, 2].
inline Tensor decode_keypoints(const Tensor& heatmaps) {
    if (heatmaps.rank() != 4) {
        throw std::invalid_argument("decode_keypoints: expected [N, J, h, w], got " +
                                    detail::shape_str(heatmaps.shape()));
    }
    const std::size_t N = heatmaps.dim(0), J = heatmaps.dim(1), H = heatmaps.dim(2), W = heatmaps.dim(3);
    Tensor coords({N, J, 2});
    const double* p = heatmaps.ptr();
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t j = 0; j < J; ++j) {
            const double* m = p + (n * J + j) * H * W;
            std::size_t best = 0;
            for (std::size_t i = 1; i < H * W; ++i) {
                if (m[i] > m[best]) best = i;
            }
            coords(n, j, 0) = static_cast<double>(best / W);
            coords(n, j, 1) = static_cast<double>(best % W);
        }
    }
    return coords;
}

/// Peak value per joint, [N, J]; used as pseudo-label confidence.
inline Tensor heatmap_peaks(const Tensor& heatmaps) {
    if (heatmaps.rank() != 4) {
        throw std::invalid_argument("heatmap_peaks: expected [N, J, h, w], got " +
                                    detail::shape_str(heatmaps.shape()));
    }
    const std::size_t N = heatmaps.dim(0), J = heatmaps.dim(1), HW = heatmaps.dim(2) * heatmaps.dim(3);
    Tensor peaks({N, J});
    const double* p = heatmaps.ptr();
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t j = 0; j < J; ++j) {
            const double* m = p + (n * J + j) * HW;
            double best = m[0];
            for (std::size_t i = 1; i < HW; ++i) best = std::max(best, m[i]);
            peaks(n, j) = best;
        }
    }
    return peaks;
}

}  // namespace imsty
