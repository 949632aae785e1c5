#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "imsty/model.hpp"
#include "imsty/parallel.hpp"
#include "imsty/rng.hpp"
#include "imsty/tensor.hpp"

namespace imsty {

enum class Domain { source, target };

inline const char* domain_name(Domain d) { return d == Domain::source ? "source" : "target"; }

/// A full dataset held in memory. Keypoints (when present) are [M, J, 2] as
/// (row, col) in image pixels; all keypoints of generated data are valid.
struct Dataset {
    Tensor images;  // [M, C, H, W], values in [0, 1]
    std::vector<int> labels;            // classification labels (empty for pose)
    Tensor keypoints;                   // pose labels (undefined for classification)
    std::vector<std::int64_t> ids;
    Domain domain = Domain::source;

    std::size_t size() const { return images.defined() ? images.dim(0) : 0; }
    bool has_keypoints() const { return keypoints.defined(); }
};

/// One training mini-batch. Labels are only attached for batches that are
/// allowed to see them (source during adaptation, anything during eval).
struct DomainBatch {
    Tensor images;  // [N, C, H, W]
    Domain domain = Domain::source;
    std::optional<std::vector<int>> class_labels;
    Tensor keypoints;    // [N, J, 2], undefined when absent
    Tensor joint_valid;  // [N, J] 0/1, undefined when absent
    std::vector<std::int64_t> ids;
};

struct ShiftSpec {
    bool invert = false;
    double noise_sigma = 0.0;
    double texture_amp = 0.0;
    double contrast = 1.0;    // multiplicative around 0.5
    double brightness = 0.0;  // additive
    std::uint64_t seed = 0;
};

struct AugmentSpec {
    double rotation_deg = 0.0;
    double shear_deg = 0.0;
    double translate_frac = 0.0;
    double scale_min = 1.0;
    double scale_max = 1.0;
    double contrast = 0.0;

    bool is_identity() const {
        return rotation_deg == 0.0 && shear_deg == 0.0 && translate_frac == 0.0 &&
               scale_min == 1.0 && scale_max == 1.0 && contrast == 0.0;
    }
    static AugmentSpec digits_default() { return {15.0, 0.0, 0.05, 0.9, 1.1, 0.25}; }
    static AugmentSpec pose_default() { return {60.0, 30.0, 0.05, 0.6, 1.3, 0.25}; }
};

namespace detail {

struct Seg {
    double r0, c0, r1, c1;  // endpoints in unit coordinates
};

inline double point_segment_dist(double r, double c, const Seg& s) {
    const double vr = s.r1 - s.r0, vc = s.c1 - s.c0;
    const double wr = r - s.r0, wc = c - s.c0;
    const double vv = vr * vr + vc * vc;
    double t = vv > 0.0 ? (wr * vr + wc * vc) / vv : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double dr = r - (s.r0 + t * vr), dc = c - (s.c0 + t * vc);
    return std::sqrt(dr * dr + dc * dc);
}

/// Seven-segment style stroke pattern per digit class, in a unit box.
inline std::vector<Seg> digit_segments(int cls) {
    // Segment endpoints: A top, B top-right, C bottom-right, D bottom,
    // E bottom-left, F top-left, G middle.
    const double L = 0.25, R = 0.75, T = 0.15, M = 0.5, B = 0.85;
    const Seg A{T, L, T, R}, Bs{T, R, M, R}, Cs{M, R, B, R}, D{B, L, B, R},
        E{M, L, B, L}, F{T, L, M, L}, G{M, L, M, R};
    switch (cls) {
        case 0: return {A, Bs, Cs, D, E, F};
        case 1: return {Bs, Cs};
        case 2: return {A, Bs, G, E, D};
        case 3: return {A, Bs, G, Cs, D};
        case 4: return {F, G, Bs, Cs};
        case 5: return {A, F, G, Cs, D};
        case 6: return {A, F, G, E, D, Cs};
        case 7: return {A, Bs, Cs};
        case 8: return {A, Bs, Cs, D, E, F, G};
        case 9: return {A, Bs, Cs, D, F, G};
        default: throw std::invalid_argument("digit_segments: class out of range");
    }
}

inline void draw_segments(double* img, std::size_t size, const std::vector<Seg>& segs,
                          double thickness, double intensity) {
    const double aa = 0.8;  // soft edge width in pixels
    for (std::size_t r = 0; r < size; ++r) {
        for (std::size_t c = 0; c < size; ++c) {
            double d = 1e30;
            for (const Seg& s : segs) {
                d = std::min(d, point_segment_dist(static_cast<double>(r), static_cast<double>(c), s));
            }
            const double cov = std::clamp(1.0 - (d - thickness * 0.5) / aa, 0.0, 1.0);
            const double v = intensity * cov;
            if (v > img[r * size + c]) img[r * size + c] = v;
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Synthetic generators (pure functions of parameters + seed)
// ---------------------------------------------------------------------------

/// Procedural digit glyphs on a dark background; classes are assigned
/// round-robin so counts are balanced. Per-sample jitter: position,
/// thickness, brightness.
inline Dataset gen_synth_digits(std::size_t count, int classes, std::size_t size,
                                std::uint64_t seed) {
    if (size < 16) throw std::invalid_argument("gen_synth_digits: size must be >= 16");
    if (classes < 2 || classes > 10) {
        throw std::invalid_argument("gen_synth_digits: classes must be in [2, 10]");
    }
    Dataset ds;
    ds.domain = Domain::source;
    ds.images = Tensor({count, 1, size, size});
    ds.labels.resize(count);
    ds.ids.resize(count);
    double* base = ds.images.ptr();
    std::vector<int> labels(count);
    for (std::size_t i = 0; i < count; ++i) labels[i] = static_cast<int>(i % static_cast<std::size_t>(classes));
    parallel_for(0, count, [&](std::size_t i) {
        Rng rng(mix_seed(seed, i));
        const int cls = labels[i];
        std::vector<detail::Seg> segs = detail::digit_segments(cls);
        // unit box -> pixels with a per-sample offset
        const double s = static_cast<double>(size);
        const double off_r = rng.uniform(-0.05, 0.05) * s;
        const double off_c = rng.uniform(-0.05, 0.05) * s;
        for (detail::Seg& sg : segs) {
            sg.r0 = sg.r0 * s + off_r;
            sg.c0 = sg.c0 * s + off_c;
            sg.r1 = sg.r1 * s + off_r;
            sg.c1 = sg.c1 * s + off_c;
        }
        const double thickness = rng.uniform(0.06, 0.10) * s;
        const double intensity = rng.uniform(0.8, 1.0);
        detail::draw_segments(base + i * size * size, size, segs, thickness, intensity);
    });
    ds.labels = std::move(labels);
    for (std::size_t i = 0; i < count; ++i) ds.ids[i] = static_cast<std::int64_t>(i);
    return ds;
}

/// Articulated stick figure: a joint chain with limited relative angles,
/// scaled to keep every joint at least ~3 px inside the image. Keypoints are
/// the chain nodes, (row, col) in pixels.
inline Dataset gen_synth_keypoints(std::size_t count, int joints, std::size_t size,
                                   std::uint64_t seed) {
    if (joints < 2 || joints > 8) {
        throw std::invalid_argument("gen_synth_keypoints: joints must be in [2, 8]");
    }
    if (size < 16) throw std::invalid_argument("gen_synth_keypoints: size must be >= 16");
    Dataset ds;
    ds.domain = Domain::source;
    ds.images = Tensor({count, 1, size, size});
    ds.keypoints = Tensor({count, static_cast<std::size_t>(joints), 2});
    ds.ids.resize(count);
    double* img_base = ds.images.ptr();
    double* kp_base = ds.keypoints.ptr();
    const std::size_t J = static_cast<std::size_t>(joints);
    parallel_for(0, count, [&](std::size_t i) {
        Rng rng(mix_seed(seed, i, 0x6b70));
        const double s = static_cast<double>(size);
        std::vector<double> pr(J), pc(J);
        pr[0] = 0.0;
        pc[0] = 0.0;
        double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        for (std::size_t j = 1; j < J; ++j) {
            angle += rng.uniform(-0.9, 0.9);  // ~±50 degrees between bones
            const double len = rng.uniform(0.18, 0.28) * s;
            pr[j] = pr[j - 1] + len * std::sin(angle);
            pc[j] = pc[j - 1] + len * std::cos(angle);
        }
        // Fit the figure into [margin, size-1-margin] in both axes.
        const double margin = 3.0;
        double rmin = pr[0], rmax = pr[0], cmin = pc[0], cmax = pc[0];
        for (std::size_t j = 1; j < J; ++j) {
            rmin = std::min(rmin, pr[j]);
            rmax = std::max(rmax, pr[j]);
            cmin = std::min(cmin, pc[j]);
            cmax = std::max(cmax, pc[j]);
        }
        const double span = std::max({rmax - rmin, cmax - cmin, 1e-9});
        const double avail = s - 1.0 - 2.0 * margin;
        const double scale = std::min(1.0, avail / span);
        // Random placement of the scaled bounding box inside the margin box.
        const double box_r = (rmax - rmin) * scale, box_c = (cmax - cmin) * scale;
        const double r0 = margin + rng.uniform(0.0, avail - box_r);
        const double c0 = margin + rng.uniform(0.0, avail - box_c);
        std::vector<detail::Seg> segs;
        for (std::size_t j = 0; j < J; ++j) {
            pr[j] = (pr[j] - rmin) * scale + r0;
            pc[j] = (pc[j] - cmin) * scale + c0;
            kp_base[(i * J + j) * 2 + 0] = pr[j];
            kp_base[(i * J + j) * 2 + 1] = pc[j];
            if (j > 0) segs.push_back({pr[j - 1], pc[j - 1], pr[j], pc[j]});
        }
        const double thickness = rng.uniform(1.6, 2.4);
        const double intensity = rng.uniform(0.85, 1.0);
        detail::draw_segments(img_base + i * size * size, size, segs, thickness, intensity);
        // Slightly brighter blobs at the joints so they are visually distinct.
        std::vector<detail::Seg> dots;
        for (std::size_t j = 0; j < J; ++j) dots.push_back({pr[j], pc[j], pr[j], pc[j]});
        detail::draw_segments(img_base + i * size * size, size, dots, thickness * 1.4, intensity);
    });
    for (std::size_t i = 0; i < count; ++i) ds.ids[i] = static_cast<std::int64_t>(i);
    return ds;
}

/// Deterministic per-sample domain shift; labels are carried through (they
/// are only ever used for evaluation of target data).
inline Dataset apply_domain_shift(const Dataset& src, const ShiftSpec& spec) {
    Dataset out;
    out.domain = Domain::target;
    out.labels = src.labels;
    if (src.has_keypoints()) out.keypoints = src.keypoints.detach();
    out.ids = src.ids;
    out.images = src.images.detach();
    const std::size_t M = src.size();
    const std::size_t C = src.images.dim(1), H = src.images.dim(2), W = src.images.dim(3);
    double* base = out.images.ptr();
    parallel_for(0, M, [&](std::size_t i) {
        Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(out.ids[i]), 0x5348));
        double* img = base + i * C * H * W;
        const double fr = rng.uniform(1.5, 3.5), fc = rng.uniform(1.5, 3.5);
        const double phr = rng.uniform(0.0, 1.0), phc = rng.uniform(0.0, 1.0);
        const double two_pi = 2.0 * 3.14159265358979323846;
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t r = 0; r < H; ++r) {
                for (std::size_t w = 0; w < W; ++w) {
                    double v = img[(c * H + r) * W + w];
                    if (spec.invert) v = 1.0 - v;
                    if (spec.contrast != 1.0 || spec.brightness != 0.0) {
                        v = (v - 0.5) * spec.contrast + 0.5 + spec.brightness;
                    }
                    if (spec.texture_amp != 0.0) {
                        const double tr = std::sin(two_pi * (fr * static_cast<double>(r) / static_cast<double>(H) + phr));
                        const double tc = std::sin(two_pi * (fc * static_cast<double>(w) / static_cast<double>(W) + phc));
                        v += spec.texture_amp * 0.5 * (tr * tc + 1.0);
                    }
                    if (spec.noise_sigma != 0.0) v += rng.normal(0.0, spec.noise_sigma);
                    if (spec.invert || spec.contrast != 1.0 || spec.brightness != 0.0 ||
                        spec.texture_amp != 0.0 || spec.noise_sigma != 0.0) {
                        v = std::clamp(v, 0.0, 1.0);
                    }
                    img[(c * H + r) * W + w] = v;
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

namespace detail {

struct Affine2 {
    // forward map on (x=col, y=row): p' = M (p - center) + center + t
    double m00, m01, m10, m11;
    double tx, ty;
    double cx, cy;

    void apply(double row, double col, double& row_out, double& col_out) const {
        const double x = col - cx, y = row - cy;
        col_out = m00 * x + m01 * y + cx + tx;
        row_out = m10 * x + m11 * y + cy + ty;
    }

    Affine2 inverse() const {
        const double det = m00 * m11 - m01 * m10;
        Affine2 inv{};
        inv.m00 = m11 / det;
        inv.m01 = -m01 / det;
        inv.m10 = -m10 / det;
        inv.m11 = m00 / det;
        inv.cx = cx;
        inv.cy = cy;
        // inverse of p' = M(p-c)+c+t is p = M^-1(p'-c-t)+c
        inv.tx = 0.0;
        inv.ty = 0.0;
        return inv;  // caller must subtract t before applying
    }
};

inline double bilinear_zero(const double* img, std::size_t H, std::size_t W, double r, double c) {
    const long long r0 = static_cast<long long>(std::floor(r));
    const long long c0 = static_cast<long long>(std::floor(c));
    const double fr = r - static_cast<double>(r0);
    const double fc = c - static_cast<double>(c0);
    auto tap = [&](long long rr, long long cc) -> double {
        if (rr < 0 || cc < 0 || rr >= static_cast<long long>(H) || cc >= static_cast<long long>(W)) return 0.0;
        return img[static_cast<std::size_t>(rr) * W + static_cast<std::size_t>(cc)];
    };
    return tap(r0, c0) * (1.0 - fr) * (1.0 - fc) + tap(r0, c0 + 1) * (1.0 - fr) * fc +
           tap(r0 + 1, c0) * fr * (1.0 - fc) + tap(r0 + 1, c0 + 1) * fr * fc;
}

}  // namespace detail

/// Per-sample random affine (rotation, shear, translation, scale) with
/// inverse-mapped bilinear sampling and zero fill, plus contrast jitter
/// around the per-image mean. Keypoints follow the same affine; joints moved
/// outside the image are marked invalid. The per-sample RNG stream is
/// mix(stream_seed, sample position), so results do not depend on thread
/// count or batch composition elsewhere.
inline DomainBatch augment(const DomainBatch& batch, const AugmentSpec& spec,
                           std::uint64_t stream_seed) {
    if (spec.scale_min > spec.scale_max || spec.scale_min <= 0.0) {
        throw std::invalid_argument("augment: invalid scale range");
    }
    DomainBatch out;
    out.domain = batch.domain;
    out.class_labels = batch.class_labels;
    out.ids = batch.ids;
    out.images = Tensor(batch.images.shape());
    const std::size_t N = batch.images.dim(0), C = batch.images.dim(1), H = batch.images.dim(2),
                      W = batch.images.dim(3);
    const bool has_kp = batch.keypoints.defined();
    std::size_t J = 0;
    if (has_kp) {
        J = batch.keypoints.dim(1);
        out.keypoints = Tensor({N, J, 2});
        out.joint_valid = Tensor({N, J}, 1.0);
    }
    const double deg2rad = 3.14159265358979323846 / 180.0;
    const double* src = batch.images.ptr();
    double* dst = out.images.ptr();

    parallel_for(0, N, [&](std::size_t i) {
        Rng rng(mix_seed(stream_seed, i, 0x4155));
        const double theta = rng.uniform(-spec.rotation_deg, spec.rotation_deg) * deg2rad;
        const double shear = std::tan(rng.uniform(-spec.shear_deg, spec.shear_deg) * deg2rad);
        const double scale = rng.uniform(spec.scale_min, spec.scale_max);
        const double tx = rng.uniform(-spec.translate_frac, spec.translate_frac) * static_cast<double>(W);
        const double ty = rng.uniform(-spec.translate_frac, spec.translate_frac) * static_cast<double>(H);
        const double cjit = spec.contrast > 0.0
                                ? rng.uniform(std::max(0.0, 1.0 - spec.contrast), 1.0 + spec.contrast)
                                : 1.0;
        // M = R(theta) * Shear_x(shear) * Scale(scale)
        const double ct = std::cos(theta), st = std::sin(theta);
        detail::Affine2 A{};
        A.m00 = scale * ct;
        A.m01 = scale * (ct * shear - st);
        A.m10 = scale * st;
        A.m11 = scale * (st * shear + ct);
        A.tx = tx;
        A.ty = ty;
        A.cx = (static_cast<double>(W) - 1.0) / 2.0;
        A.cy = (static_cast<double>(H) - 1.0) / 2.0;
        const detail::Affine2 Ainv = A.inverse();

        for (std::size_t c = 0; c < C; ++c) {
            const double* simg = src + (i * C + c) * H * W;
            double* dimg = dst + (i * C + c) * H * W;
            for (std::size_t r = 0; r < H; ++r) {
                for (std::size_t w = 0; w < W; ++w) {
                    // inverse map: p = M^-1 (p' - c - t) + c
                    const double x = static_cast<double>(w) - A.cx - A.tx;
                    const double y = static_cast<double>(r) - A.cy - A.ty;
                    const double sc = Ainv.m00 * x + Ainv.m01 * y + A.cx;
                    const double sr = Ainv.m10 * x + Ainv.m11 * y + A.cy;
                    dimg[r * W + w] = detail::bilinear_zero(simg, H, W, sr, sc);
                }
            }
            if (cjit != 1.0) {
                double mean = 0.0;
                for (std::size_t k = 0; k < H * W; ++k) mean += dimg[k];
                mean /= static_cast<double>(H * W);
                for (std::size_t k = 0; k < H * W; ++k) {
                    dimg[k] = std::clamp(mean + (dimg[k] - mean) * cjit, 0.0, 1.0);
                }
            }
        }
        if (has_kp) {
            for (std::size_t j = 0; j < J; ++j) {
                double nr, nc;
                A.apply(batch.keypoints(i, j, 0), batch.keypoints(i, j, 1), nr, nc);
                out.keypoints(i, j, 0) = nr;
                out.keypoints(i, j, 1) = nc;
                const bool inside = nr >= 0.0 && nc >= 0.0 && nr <= static_cast<double>(H) - 1.0 &&
                                    nc <= static_cast<double>(W) - 1.0;
                const bool was_valid = !batch.joint_valid.defined() || batch.joint_valid(i, j) != 0.0;
                out.joint_valid(i, j) = (inside && was_valid) ? 1.0 : 0.0;
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Gathers a batch by dataset indices. with_labels controls whether labels
/// ride along (target batches drop them during adaptation).
inline DomainBatch make_batch(const Dataset& ds, const std::vector<std::size_t>& indices,
                              bool with_labels) {
    DomainBatch b;
    b.domain = ds.domain;
    const std::size_t C = ds.images.dim(1), H = ds.images.dim(2), W = ds.images.dim(3);
    b.images = Tensor({indices.size(), C, H, W});
    const double* src = ds.images.ptr();
    double* dst = b.images.ptr();
    const std::size_t stride = C * H * W;
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= ds.size()) throw std::out_of_range("make_batch: index out of range");
        std::copy(src + indices[i] * stride, src + (indices[i] + 1) * stride, dst + i * stride);
        b.ids.push_back(ds.ids[indices[i]]);
    }
    if (with_labels && !ds.labels.empty()) {
        std::vector<int> labels;
        for (std::size_t idx : indices) labels.push_back(ds.labels[idx]);
        b.class_labels = std::move(labels);
    }
    if (with_labels && ds.has_keypoints()) {
        const std::size_t J = ds.keypoints.dim(1);
        b.keypoints = Tensor({indices.size(), J, 2});
        b.joint_valid = Tensor({indices.size(), J}, 1.0);
        for (std::size_t i = 0; i < indices.size(); ++i) {
            for (std::size_t j = 0; j < J; ++j) {
                b.keypoints(i, j, 0) = ds.keypoints(indices[i], j, 0);
                b.keypoints(i, j, 1) = ds.keypoints(indices[i], j, 1);
            }
        }
    }
    return b;
}

// ---------------------------------------------------------------------------
// IDX format
// ---------------------------------------------------------------------------

/// Reads an IDX file (unsigned-byte payload). Rank-1 files are treated as
/// label vectors and returned unscaled; higher ranks are pixel data scaled
/// to [0, 1].
inline Tensor read_idx(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_idx: cannot open '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    auto fail = [&](std::size_t offset, const std::string& what) {
        throw std::runtime_error("read_idx '" + path + "': " + what + " at byte offset " +
                                 std::to_string(offset));
    };
    if (bytes.size() < 4) {
        fail(bytes.size(), "truncated header (need 4 bytes, have " + std::to_string(bytes.size()) + ")");
    }
    const unsigned char b0 = static_cast<unsigned char>(bytes[0]);
    const unsigned char b1 = static_cast<unsigned char>(bytes[1]);
    const unsigned char dtype = static_cast<unsigned char>(bytes[2]);
    const unsigned char rank = static_cast<unsigned char>(bytes[3]);
    if (b0 != 0 || b1 != 0) fail(0, "bad magic (first two bytes must be zero)");
    if (dtype != 0x08) {
        std::ostringstream os;
        os << "unsupported dtype 0x" << std::hex << static_cast<int>(dtype) << " (only 0x08 unsigned byte)";
        fail(2, os.str());
    }
    if (rank == 0) fail(3, "rank must be >= 1");
    const std::size_t dims_end = 4 + 4 * static_cast<std::size_t>(rank);
    if (bytes.size() < dims_end) {
        fail(bytes.size(), "truncated dimension list (need " + std::to_string(dims_end) + " bytes, have " +
                               std::to_string(bytes.size()) + ")");
    }
    std::vector<std::size_t> shape(rank);
    std::size_t total = 1;
    for (std::size_t d = 0; d < rank; ++d) {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v = (v << 8) | static_cast<unsigned char>(bytes[4 + 4 * d + static_cast<std::size_t>(i)]);
        }
        if (v == 0) fail(4 + 4 * d, "zero dimension");
        shape[d] = v;
        total *= v;
    }
    if (bytes.size() < dims_end + total) {
        fail(bytes.size(), "truncated data (expected " + std::to_string(dims_end + total) +
                               " bytes total, file has " + std::to_string(bytes.size()) + ")");
    }
    std::vector<double> data(total);
    const double scale = rank == 1 ? 1.0 : 1.0 / 255.0;
    for (std::size_t i = 0; i < total; ++i) {
        data[i] = static_cast<double>(static_cast<unsigned char>(bytes[dims_end + i])) * scale;
    }
    return Tensor::from_data(std::move(shape), std::move(data));
}

/// Builds a classification Dataset from IDX image + label files.
inline Dataset dataset_from_idx(const std::string& images_path, const std::string& labels_path) {
    Tensor images = read_idx(images_path);
    Tensor labels = read_idx(labels_path);
    if (images.rank() != 3) {
        throw std::runtime_error("dataset_from_idx: image file must be rank 3 [count, rows, cols], got " +
                                 detail::shape_str(images.shape()));
    }
    if (labels.rank() != 1 || labels.dim(0) != images.dim(0)) {
        throw std::runtime_error("dataset_from_idx: label count does not match image count");
    }
    Dataset ds;
    ds.images = reshape(images, {images.dim(0), 1, images.dim(1), images.dim(2)});
    ds.labels.resize(labels.dim(0));
    for (std::size_t i = 0; i < labels.dim(0); ++i) ds.labels[i] = static_cast<int>(labels(i));
    ds.ids.resize(images.dim(0));
    for (std::size_t i = 0; i < ds.ids.size(); ++i) ds.ids[i] = static_cast<std::int64_t>(i);
    return ds;
}

// ---------------------------------------------------------------------------
// Dataset export: one raw little-endian f64 file per sample plus a manifest
// (one line per sample: id, then label fields).
// ---------------------------------------------------------------------------

inline void export_dataset(const Dataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const std::size_t stride = ds.images.numel() / std::max<std::size_t>(ds.size(), 1);
    std::ostringstream manifest;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        std::ostringstream name;
        name << std::setw(6) << std::setfill('0') << ds.ids[i] << ".f64";
        const std::string path = (fs::path(dir) / name.str()).string();
        std::string out;
        out.reserve(stride * 8);
        const double* p = ds.images.ptr() + i * stride;
        for (std::size_t j = 0; j < stride; ++j) {
            std::uint64_t bits;
            std::memcpy(&bits, p + j, sizeof(bits));
            for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
        }
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("export_dataset: cannot write '" + path + "'");
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        manifest << ds.ids[i];
        if (!ds.labels.empty()) manifest << " " << ds.labels[i];
        if (ds.has_keypoints()) {
            const std::size_t J = ds.keypoints.dim(1);
            manifest.setf(std::ios::fmtflags(0), std::ios::floatfield);
            for (std::size_t j = 0; j < J; ++j) {
                std::ostringstream kv;
                kv.precision(17);
                kv << " " << ds.keypoints(i, j, 0) << " " << ds.keypoints(i, j, 1);
                manifest << kv.str();
            }
        }
        manifest << "\n";
    }
    std::ofstream mf((fs::path(dir) / "manifest.txt").string(), std::ios::trunc);
    if (!mf) throw std::runtime_error("export_dataset: cannot write manifest");
    mf << manifest.str();
    // Shape metadata so the directory is self-describing.
    std::ofstream meta((fs::path(dir) / "meta.txt").string(), std::ios::trunc);
    meta << "count " << ds.size() << "\n"
         << "channels " << ds.images.dim(1) << "\n"
         << "height " << ds.images.dim(2) << "\n"
         << "width " << ds.images.dim(3) << "\n"
         << "domain " << domain_name(ds.domain) << "\n";
    if (ds.has_keypoints()) meta << "joints " << ds.keypoints.dim(1) << "\n";
}

}  // namespace imsty
