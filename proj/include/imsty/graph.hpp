#pragma once

#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

// Layer graphs describe model architectures as flat layer lists. They are
// what the profiler consumes (including graphs supplied as text files) and
// what models are built from. A graph carries hyperparameters only;
// parameter shapes are resolved by walking it with a concrete input shape.

namespace imsty {

enum class LayerKind { input, conv, tconv, bn, relu, maxpool, flatten, linear, imsty };

inline const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::input: return "input";
        case LayerKind::conv: return "conv";
        case LayerKind::tconv: return "tconv";
        case LayerKind::bn: return "bn";
        case LayerKind::relu: return "relu";
        case LayerKind::maxpool: return "maxpool";
        case LayerKind::flatten: return "flatten";
        case LayerKind::linear: return "linear";
        case LayerKind::imsty: return "imsty";
    }
    return "?";
}

struct LayerDesc {
    LayerKind kind = LayerKind::relu;
    int out = 0;       // conv/tconv output channels, linear output features
    int kernel = 0;    // conv/tconv/maxpool kernel size
    int stride = 1;    // conv/tconv stride
    int padding = 0;   // conv/tconv zero padding
    int channels = 0;  // input layer: image channels (0 if flat input)
    int features = 0;  // input layer: flat features (0 if image input)
};

struct LayerGraph {
    std::vector<LayerDesc> layers;
};

/// Concatenates two graphs; the second graph's input layer (if any) is
/// dropped, the shape walk checks that the seam composes.
inline LayerGraph concat_graphs(const LayerGraph& a, const LayerGraph& b) {
    LayerGraph g = a;
    for (std::size_t i = 0; i < b.layers.size(); ++i) {
        if (i == 0 && b.layers[i].kind == LayerKind::input) continue;
        g.layers.push_back(b.layers[i]);
    }
    return g;
}

// ---------------------------------------------------------------------------
// Shape walk
// ---------------------------------------------------------------------------

/// Activation shape between layers: either a feature map (C, H, W) or a flat
/// feature vector.
struct ActShape {
    bool spatial = true;
    std::size_t c = 0, h = 0, w = 0;
    std::size_t features = 0;

    std::size_t elements() const { return spatial ? c * h * w : features; }
    std::string str() const {
        std::ostringstream os;
        if (spatial) {
            os << c << "x" << h << "x" << w;
        } else {
            os << features;
        }
        return os.str();
    }
};

struct WalkedLayer {
    LayerDesc desc;
    ActShape in_shape;
    ActShape out_shape;
    std::vector<std::vector<std::size_t>> param_shapes;  // weight [+ bias] / gamma+beta
};

/// A graph validated against a concrete input size, with every layer's
/// in/out shape and parameter shapes resolved.
struct WalkedGraph {
    std::vector<WalkedLayer> layers;
    int tap_index = -1;  // index of the imsty layer, -1 if absent
    ActShape input_shape;
    ActShape output_shape;
};

inline WalkedGraph shape_check(const LayerGraph& g, std::size_t input_h, std::size_t input_w) {
    if (g.layers.empty()) throw std::invalid_argument("shape_check: empty graph");
    if (g.layers.front().kind != LayerKind::input) {
        throw std::invalid_argument("shape_check: first layer must be 'input'");
    }
    WalkedGraph wg;
    const LayerDesc& in = g.layers.front();
    ActShape cur;
    if (in.channels > 0) {
        if (input_h == 0 || input_w == 0) {
            throw std::invalid_argument("shape_check: image input needs a positive resolution");
        }
        cur = ActShape{true, static_cast<std::size_t>(in.channels), input_h, input_w, 0};
    } else if (in.features > 0) {
        cur = ActShape{false, 0, 0, 0, static_cast<std::size_t>(in.features)};
    } else {
        throw std::invalid_argument("shape_check: input layer needs channels= or features=");
    }
    wg.input_shape = cur;

    for (std::size_t i = 0; i < g.layers.size(); ++i) {
        const LayerDesc& d = g.layers[i];
        WalkedLayer wl;
        wl.desc = d;
        wl.in_shape = cur;
        auto at = [&]() { return "layer " + std::to_string(i) + " (" + layer_kind_name(d.kind) + ")"; };
        auto need_spatial = [&]() {
            if (!cur.spatial) {
                throw std::invalid_argument("shape_check: " + at() + " needs a feature map input, got flat " +
                                            cur.str());
            }
        };
        switch (d.kind) {
            case LayerKind::input:
                if (i != 0) throw std::invalid_argument("shape_check: 'input' only allowed as first layer");
                break;
            case LayerKind::conv: {
                need_spatial();
                if (d.out < 1 || d.kernel < 1 || d.stride < 1 || d.padding < 0) {
                    throw std::invalid_argument("shape_check: " + at() + " has invalid hyperparameters");
                }
                const long long ho = (static_cast<long long>(cur.h) + 2 * d.padding - d.kernel) / d.stride + 1;
                const long long wo = (static_cast<long long>(cur.w) + 2 * d.padding - d.kernel) / d.stride + 1;
                if (ho < 1 || wo < 1) {
                    throw std::invalid_argument("shape_check: " + at() + " kernel does not fit input " + cur.str());
                }
                wl.param_shapes = {{static_cast<std::size_t>(d.out), cur.c,
                                    static_cast<std::size_t>(d.kernel), static_cast<std::size_t>(d.kernel)},
                                   {static_cast<std::size_t>(d.out)}};
                cur = ActShape{true, static_cast<std::size_t>(d.out), static_cast<std::size_t>(ho),
                               static_cast<std::size_t>(wo), 0};
                break;
            }
            case LayerKind::tconv: {
                need_spatial();
                if (d.out < 1 || d.kernel < 1 || d.stride < 1 || d.padding < 0) {
                    throw std::invalid_argument("shape_check: " + at() + " has invalid hyperparameters");
                }
                const long long ho = (static_cast<long long>(cur.h) - 1) * d.stride - 2 * d.padding + d.kernel;
                const long long wo = (static_cast<long long>(cur.w) - 1) * d.stride - 2 * d.padding + d.kernel;
                if (ho < 1 || wo < 1) {
                    throw std::invalid_argument("shape_check: " + at() + " produces empty output from " + cur.str());
                }
                wl.param_shapes = {{cur.c, static_cast<std::size_t>(d.out),
                                    static_cast<std::size_t>(d.kernel), static_cast<std::size_t>(d.kernel)},
                                   {static_cast<std::size_t>(d.out)}};
                cur = ActShape{true, static_cast<std::size_t>(d.out), static_cast<std::size_t>(ho),
                               static_cast<std::size_t>(wo), 0};
                break;
            }
            case LayerKind::bn:
                need_spatial();
                wl.param_shapes = {{cur.c}, {cur.c}};  // gamma, beta
                break;
            case LayerKind::relu:
                break;
            case LayerKind::maxpool: {
                need_spatial();
                if (d.kernel < 1) throw std::invalid_argument("shape_check: " + at() + " needs k >= 1");
                const std::size_t ho = cur.h / static_cast<std::size_t>(d.kernel);
                const std::size_t wo = cur.w / static_cast<std::size_t>(d.kernel);
                if (ho == 0 || wo == 0) {
                    throw std::invalid_argument("shape_check: " + at() + " window larger than input " + cur.str());
                }
                cur = ActShape{true, cur.c, ho, wo, 0};
                break;
            }
            case LayerKind::flatten:
                need_spatial();
                cur = ActShape{false, 0, 0, 0, cur.c * cur.h * cur.w};
                break;
            case LayerKind::linear: {
                if (cur.spatial) {
                    throw std::invalid_argument("shape_check: " + at() + " needs flat input; insert 'flatten'");
                }
                if (d.out < 1) throw std::invalid_argument("shape_check: " + at() + " needs out >= 1");
                wl.param_shapes = {{static_cast<std::size_t>(d.out), cur.features},
                                   {static_cast<std::size_t>(d.out)}};
                cur = ActShape{false, 0, 0, 0, static_cast<std::size_t>(d.out)};
                break;
            }
            case LayerKind::imsty:
                need_spatial();
                if (wg.tap_index >= 0) {
                    throw std::invalid_argument("shape_check: more than one imsty alignment tap");
                }
                wg.tap_index = static_cast<int>(i);
                break;
        }
        wl.out_shape = cur;
        wg.layers.push_back(std::move(wl));
    }
    wg.output_shape = cur;
    return wg;
}

// ---------------------------------------------------------------------------
// Text serialization: one layer per line, "kind key=value ...".
// ---------------------------------------------------------------------------

inline std::string serialize_graph(const LayerGraph& g) {
    std::ostringstream os;
    for (const LayerDesc& d : g.layers) {
        os << layer_kind_name(d.kind);
        switch (d.kind) {
            case LayerKind::input:
                if (d.channels > 0) {
                    os << " channels=" << d.channels;
                } else {
                    os << " features=" << d.features;
                }
                break;
            case LayerKind::conv:
            case LayerKind::tconv:
                os << " out=" << d.out << " k=" << d.kernel << " stride=" << d.stride
                   << " pad=" << d.padding;
                break;
            case LayerKind::maxpool:
                os << " k=" << d.kernel;
                break;
            case LayerKind::linear:
                os << " out=" << d.out;
                break;
            default:
                break;
        }
        os << "\n";
    }
    return os.str();
}

/// Parses the text form. Errors carry the 1-based line number.
inline LayerGraph parse_graph(const std::string& text) {
    LayerGraph g;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    static const std::map<std::string, LayerKind> kinds = {
        {"input", LayerKind::input},     {"conv", LayerKind::conv},
        {"tconv", LayerKind::tconv},     {"bn", LayerKind::bn},
        {"relu", LayerKind::relu},       {"maxpool", LayerKind::maxpool},
        {"flatten", LayerKind::flatten}, {"linear", LayerKind::linear},
        {"imsty", LayerKind::imsty}};
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        std::istringstream ls(line);
        std::string kind_word;
        if (!(ls >> kind_word)) continue;  // blank line
        auto it = kinds.find(kind_word);
        if (it == kinds.end()) {
            throw std::invalid_argument("graph line " + std::to_string(lineno) +
                                        ": unknown layer kind '" + kind_word + "'");
        }
        LayerDesc d;
        d.kind = it->second;
        std::string kv;
        while (ls >> kv) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) {
                throw std::invalid_argument("graph line " + std::to_string(lineno) +
                                            ": expected key=value, got '" + kv + "'");
            }
            const std::string key = kv.substr(0, eq);
            int value = 0;
            try {
                std::size_t used = 0;
                value = std::stoi(kv.substr(eq + 1), &used);
                if (used != kv.size() - eq - 1) throw std::invalid_argument("trailing");
            } catch (const std::exception&) {
                throw std::invalid_argument("graph line " + std::to_string(lineno) +
                                            ": value of '" + key + "' is not an integer");
            }
            if (key == "out") {
                d.out = value;
            } else if (key == "k") {
                d.kernel = value;
            } else if (key == "stride") {
                d.stride = value;
            } else if (key == "pad") {
                d.padding = value;
            } else if (key == "channels") {
                d.channels = value;
            } else if (key == "features") {
                d.features = value;
            } else {
                throw std::invalid_argument("graph line " + std::to_string(lineno) +
                                            ": unknown key '" + key + "'");
            }
        }
        g.layers.push_back(d);
    }
    if (g.layers.empty()) throw std::invalid_argument("graph: no layers found");
    return g;
}

}  // namespace imsty
