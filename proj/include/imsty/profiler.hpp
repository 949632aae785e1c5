#pragma once

#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "imsty/graph.hpp"
#include "imsty/model.hpp"

// Cost accounting for layer graphs: trainable parameter counts and MACs at a
// given input resolution. MAC convention (stated in every report):
//   conv:    out_H * out_W * out_C * in_C * K^2 per sample
//   tconv:   in_H * in_W * in_C * out_C * K^2 per sample (adjoint count)
//   linear:  in * out per sample
//   bn:      2 * output elements per sample
//   imsty:   4*N*H*W*C + 4*C per call (batch of N); fused mean/var/normalize/
//            blend at one MAC per element per stage, per-channel sqrt and
//            divide folded into the 4*C term
//   relu/maxpool/flatten: 0 (comparisons are not MACs)

namespace imsty {

struct CostRow {
    std::string name;
    long long params = 0;
    long long macs = 0;
};

struct CostReport {
    std::vector<CostRow> rows;
    long long total_params = 0;
    long long total_macs = 0;
    long long alignment_params = 0;  // imsty rows only
    long long alignment_macs = 0;
    std::size_t resolution = 0;
    int batch = 1;
};

namespace detail {

inline long long param_count(const WalkedLayer& wl) {
    long long n = 0;
    if (wl.desc.kind == LayerKind::imsty) return 0;  // non-parametric by construction
    for (const auto& shape : wl.param_shapes) {
        long long p = 1;
        for (std::size_t d : shape) p *= static_cast<long long>(d);
        n += p;
    }
    return n;
}

inline long long mac_count(const WalkedLayer& wl, int batch) {
    const LayerDesc& d = wl.desc;
    const ActShape& in = wl.in_shape;
    const ActShape& out = wl.out_shape;
    switch (d.kind) {
        case LayerKind::conv:
            return static_cast<long long>(out.h) * static_cast<long long>(out.w) *
                   static_cast<long long>(out.c) * static_cast<long long>(in.c) *
                   static_cast<long long>(d.kernel) * static_cast<long long>(d.kernel);
        case LayerKind::tconv:
            return static_cast<long long>(in.h) * static_cast<long long>(in.w) *
                   static_cast<long long>(in.c) * static_cast<long long>(out.c) *
                   static_cast<long long>(d.kernel) * static_cast<long long>(d.kernel);
        case LayerKind::linear:
            return static_cast<long long>(in.features) * static_cast<long long>(out.features);
        case LayerKind::bn:
            return 2ll * static_cast<long long>(out.elements());
        case LayerKind::imsty:
            return 4ll * batch * static_cast<long long>(in.h) * static_cast<long long>(in.w) *
                       static_cast<long long>(in.c) +
                   4ll * static_cast<long long>(in.c);
        default:
            return 0;
    }
}

}  // namespace detail

inline CostReport profile_graph(const LayerGraph& g, std::size_t resolution, int batch = 1) {
    const WalkedGraph wg = shape_check(g, resolution, resolution);
    CostReport rep;
    rep.resolution = resolution;
    rep.batch = batch;
    for (std::size_t i = 0; i < wg.layers.size(); ++i) {
        const WalkedLayer& wl = wg.layers[i];
        if (wl.desc.kind == LayerKind::input) continue;
        CostRow row;
        std::ostringstream name;
        name << "l" << i << "." << layer_kind_name(wl.desc.kind) << " " << wl.in_shape.str() << "->"
             << wl.out_shape.str();
        row.name = name.str();
        row.params = detail::param_count(wl);
        row.macs = detail::mac_count(wl, batch);
        rep.total_params += row.params;
        rep.total_macs += row.macs;
        if (wl.desc.kind == LayerKind::imsty) {
            rep.alignment_params += row.params;
            rep.alignment_macs += row.macs;
        }
        rep.rows.push_back(std::move(row));
    }
    return rep;
}

inline long long count_params(const LayerGraph& g, std::size_t resolution) {
    return profile_graph(g, resolution).total_params;
}

inline long long count_macs(const LayerGraph& g, std::size_t resolution, int batch = 1) {
    return profile_graph(g, resolution, batch).total_macs;
}

inline std::string render_cost_report(const CostReport& rep) {
    std::ostringstream os;
    os << "# cost report at resolution " << rep.resolution << "x" << rep.resolution
       << ", per-sample MACs (imsty rows counted per batch of " << rep.batch << ")\n"
       << "# conv: oH*oW*oC*iC*K^2; tconv: iH*iW*iC*oC*K^2; linear: in*out; bn: 2*elems;\n"
       << "# imsty: 4*N*H*W*C + 4*C; relu/pool/flatten: 0\n";
    std::size_t name_w = 10;
    for (const CostRow& r : rep.rows) name_w = std::max(name_w, r.name.size());
    os << std::left << std::setw(static_cast<int>(name_w) + 2) << "layer" << std::right
       << std::setw(14) << "params" << std::setw(18) << "macs" << "\n";
    for (const CostRow& r : rep.rows) {
        os << std::left << std::setw(static_cast<int>(name_w) + 2) << r.name << std::right
           << std::setw(14) << r.params << std::setw(18) << r.macs << "\n";
    }
    os << std::left << std::setw(static_cast<int>(name_w) + 2) << "total" << std::right
       << std::setw(14) << rep.total_params << std::setw(18) << rep.total_macs << "\n";
    os << std::left << std::setw(static_cast<int>(name_w) + 2) << "alignment (imsty)" << std::right
       << std::setw(14) << rep.alignment_params << std::setw(18) << rep.alignment_macs << "\n";
    return os.str();
}

inline std::string render_cost_csv(const CostReport& rep) {
    std::ostringstream os;
    os << "layer,params,macs\n";
    for (const CostRow& r : rep.rows) os << r.name << "," << r.params << "," << r.macs << "\n";
    os << "total," << rep.total_params << "," << rep.total_macs << "\n";
    os << "alignment," << rep.alignment_params << "," << rep.alignment_macs << "\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// Built-in graphs for the profile command
// ---------------------------------------------------------------------------

/// Alignment module alone, at the feature geometry of a 256x256 input to a
/// x32-downsampling 2048-channel backbone (profile at resolution 8).
inline LayerGraph builtin_imsty_graph() {
    LayerGraph g;
    g.layers.push_back({LayerKind::input, 0, 0, 1, 0, 2048, 0});
    g.layers.push_back({LayerKind::imsty});
    return g;
}

/// VGG-style encoder-decoder of the scale used by explicit stylization
/// networks; profiled as data for the cost comparison (never trained here).
inline LayerGraph builtin_stylenet_graph() {
    const char* text = R"(# stylization network comparator (encoder-decoder, 256x256)
input channels=3
conv out=64 k=3 stride=1 pad=1
relu
conv out=64 k=3 stride=1 pad=1
relu
maxpool k=2
conv out=128 k=3 stride=1 pad=1
relu
conv out=128 k=3 stride=1 pad=1
relu
maxpool k=2
conv out=256 k=3 stride=1 pad=1
relu
conv out=256 k=3 stride=1 pad=1
relu
conv out=256 k=3 stride=1 pad=1
relu
conv out=256 k=3 stride=1 pad=1
relu
maxpool k=2
conv out=512 k=3 stride=1 pad=1
relu
conv out=256 k=3 stride=1 pad=1
relu
tconv out=256 k=2 stride=2 pad=0
conv out=256 k=3 stride=1 pad=1
relu
conv out=256 k=3 stride=1 pad=1
relu
conv out=128 k=3 stride=1 pad=1
relu
tconv out=128 k=2 stride=2 pad=0
conv out=128 k=3 stride=1 pad=1
relu
conv out=64 k=3 stride=1 pad=1
relu
tconv out=64 k=2 stride=2 pad=0
conv out=64 k=3 stride=1 pad=1
relu
conv out=3 k=3 stride=1 pad=1
)";
    return parse_graph(text);
}

/// Named built-in graphs accepted by the profile command as
/// "builtin:<name>". Throws on unknown names.
inline LayerGraph builtin_graph(const std::string& name) {
    if (name == "imsty") return builtin_imsty_graph();
    if (name == "stylenet") return builtin_stylenet_graph();
    if (name == "lenet5") return build_lenet5_classifier(1, 10, 32);
    if (name == "lenet5_encoder") return build_lenet5_encoder(1);
    if (name == "posenet") return build_pose_model(1, 4, 32);
    throw std::invalid_argument("builtin_graph: unknown graph '" + name +
                                "' (known: imsty, stylenet, lenet5, lenet5_encoder, posenet)");
}

}  // namespace imsty
