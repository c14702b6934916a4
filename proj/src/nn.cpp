#include "ser/nn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>

#include <json.hpp>

#include "ser/rng.hpp"

namespace ser::nn {

namespace {

using nlohmann::json;

std::string shape_str(const std::vector<int>& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

[[noreturn]] void shape_fail(const std::string& where, const std::string& what) {
    throw ShapeError(where + ": " + what);
}

// Same-padding geometry: output = ceil(in / stride), pad split before/after.
struct AxisGeom {
    int out = 0;
    int pad_before = 0;
};

AxisGeom conv_axis(const std::string& where, int in, int kernel, int stride, bool same_pad) {
    if (kernel <= 0 || stride <= 0) shape_fail(where, "kernel and stride must be positive");
    AxisGeom g;
    if (same_pad) {
        g.out = (in + stride - 1) / stride;
        const int pad_total = std::max(0, (g.out - 1) * stride + kernel - in);
        g.pad_before = pad_total / 2;
    } else {
        if (in < kernel) {
            shape_fail(where, "input extent " + std::to_string(in) +
                                  " smaller than kernel " + std::to_string(kernel));
        }
        g.out = (in - kernel) / stride + 1;
        g.pad_before = 0;
    }
    return g;
}

template <class T>
void assert_finite(const Tensor<T>& t, const char* what) {
    for (T v : t.values) {
        if (!std::isfinite(static_cast<double>(v))) {
            throw Error(std::string("non-finite value produced in ") + what);
        }
    }
}

} // namespace

std::string to_string(LayerKind k) {
    switch (k) {
        case LayerKind::Conv2D: return "conv2d";
        case LayerKind::MaxPool2D: return "maxpool2d";
        case LayerKind::Dense: return "dense";
        case LayerKind::ReLU: return "relu";
        case LayerKind::Dropout: return "dropout";
        case LayerKind::Flatten: return "flatten";
        case LayerKind::BatchNorm: return "batchnorm";
        case LayerKind::GlobalAvgPool: return "globalavgpool";
        case LayerKind::Residual: return "residual";
    }
    throw ConfigError("invalid layer kind value");
}

namespace {

LayerKind layer_kind_from_string(const std::string& s) {
    static const std::map<std::string, LayerKind> kinds = {
        {"conv2d", LayerKind::Conv2D},     {"maxpool2d", LayerKind::MaxPool2D},
        {"dense", LayerKind::Dense},       {"relu", LayerKind::ReLU},
        {"dropout", LayerKind::Dropout},   {"flatten", LayerKind::Flatten},
        {"batchnorm", LayerKind::BatchNorm},
        {"globalavgpool", LayerKind::GlobalAvgPool},
        {"residual", LayerKind::Residual},
    };
    auto it = kinds.find(s);
    if (it == kinds.end()) throw ConfigError("unknown layer kind '" + s + "'");
    return it->second;
}

} // namespace

LayerSpec LayerSpec::conv2d(int out_channels, int kernel, int stride, bool same_pad) {
    LayerSpec s;
    s.kind = LayerKind::Conv2D;
    s.out_channels = out_channels;
    s.kernel_h = s.kernel_w = kernel;
    s.stride_h = s.stride_w = stride;
    s.same_pad = same_pad;
    return s;
}

LayerSpec LayerSpec::maxpool2(int pool) {
    LayerSpec s;
    s.kind = LayerKind::MaxPool2D;
    s.pool_h = s.pool_w = pool;
    return s;
}

LayerSpec LayerSpec::dense(int units) {
    LayerSpec s;
    s.kind = LayerKind::Dense;
    s.units = units;
    return s;
}

LayerSpec LayerSpec::relu() {
    LayerSpec s;
    s.kind = LayerKind::ReLU;
    return s;
}

LayerSpec LayerSpec::dropout(double rate) {
    LayerSpec s;
    s.kind = LayerKind::Dropout;
    s.rate = rate;
    return s;
}

LayerSpec LayerSpec::flatten() {
    LayerSpec s;
    s.kind = LayerKind::Flatten;
    return s;
}

LayerSpec LayerSpec::batchnorm() {
    LayerSpec s;
    s.kind = LayerKind::BatchNorm;
    return s;
}

LayerSpec LayerSpec::global_avg_pool() {
    LayerSpec s;
    s.kind = LayerKind::GlobalAvgPool;
    return s;
}

LayerSpec LayerSpec::residual(std::vector<LayerSpec> branch, int out_channels, int stride) {
    LayerSpec s;
    s.kind = LayerKind::Residual;
    s.branch = std::move(branch);
    s.out_channels = out_channels;
    s.stride_h = s.stride_w = stride;
    return s;
}

std::vector<int> layer_output_shape(const LayerSpec& spec, const std::vector<int>& input) {
    const std::string where = to_string(spec.kind);
    switch (spec.kind) {
        case LayerKind::Conv2D: {
            if (input.size() != 3) {
                shape_fail(where, "needs (H,W,C) input, got " + shape_str(input));
            }
            if (spec.out_channels <= 0) shape_fail(where, "out_channels must be positive");
            const AxisGeom gh =
                conv_axis(where, input[0], spec.kernel_h, spec.stride_h, spec.same_pad);
            const AxisGeom gw =
                conv_axis(where, input[1], spec.kernel_w, spec.stride_w, spec.same_pad);
            return {gh.out, gw.out, spec.out_channels};
        }
        case LayerKind::MaxPool2D: {
            if (input.size() != 3) {
                shape_fail(where, "needs (H,W,C) input, got " + shape_str(input));
            }
            if (spec.pool_h <= 0 || spec.pool_w <= 0) {
                shape_fail(where, "pool size must be positive");
            }
            const int oh = input[0] / spec.pool_h;
            const int ow = input[1] / spec.pool_w;
            if (oh < 1 || ow < 1) {
                shape_fail(where, "input " + shape_str(input) + " too small for " +
                                      std::to_string(spec.pool_h) + "x" +
                                      std::to_string(spec.pool_w) + " pooling");
            }
            return {oh, ow, input[2]};
        }
        case LayerKind::Dense: {
            if (input.size() != 1) {
                shape_fail(where, "needs flattened input, got " + shape_str(input));
            }
            if (spec.units <= 0) shape_fail(where, "units must be positive");
            return {spec.units};
        }
        case LayerKind::ReLU:
            return input;
        case LayerKind::Dropout: {
            if (!(spec.rate >= 0.0) || !(spec.rate < 1.0)) {
                throw ConfigError("dropout rate must lie in [0, 1)");
            }
            return input;
        }
        case LayerKind::Flatten: {
            int n = 1;
            for (int d : input) n *= d;
            return {n};
        }
        case LayerKind::BatchNorm: {
            if (input.size() != 1 && input.size() != 3) {
                shape_fail(where, "needs (H,W,C) or flattened input, got " + shape_str(input));
            }
            if (!(spec.epsilon > 0.0)) throw ConfigError("batchnorm epsilon must be positive");
            if (!(spec.momentum >= 0.0) || !(spec.momentum < 1.0)) {
                throw ConfigError("batchnorm momentum must lie in [0, 1)");
            }
            return input;
        }
        case LayerKind::GlobalAvgPool: {
            if (input.size() != 3) {
                shape_fail(where, "needs (H,W,C) input, got " + shape_str(input));
            }
            return {input[2]};
        }
        case LayerKind::Residual: {
            if (input.size() != 3) {
                shape_fail(where, "needs (H,W,C) input, got " + shape_str(input));
            }
            if (spec.branch.empty()) shape_fail(where, "branch must not be empty");
            std::vector<int> branch_out = input;
            for (const LayerSpec& inner : spec.branch) {
                branch_out = layer_output_shape(inner, branch_out);
            }
            std::vector<int> shortcut_out = input;
            if (!(branch_out == input)) {
                const AxisGeom gh = conv_axis(where, input[0], 1, spec.stride_h, true);
                const AxisGeom gw = conv_axis(where, input[1], 1, spec.stride_w, true);
                shortcut_out = {gh.out, gw.out, spec.out_channels};
            }
            if (!(branch_out == shortcut_out)) {
                shape_fail(where, "branch output " + shape_str(branch_out) +
                                      " does not match shortcut output " +
                                      shape_str(shortcut_out));
            }
            return branch_out;
        }
    }
    throw ConfigError("invalid layer kind value");
}

std::vector<int> chain_output_shape(const std::vector<int>& input_shape,
                                    const std::vector<LayerSpec>& layers) {
    std::vector<int> shape = input_shape;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        try {
            shape = layer_output_shape(layers[i], shape);
        } catch (const ShapeError& e) {
            throw ShapeError("layer " + std::to_string(i) + ": " + e.what());
        }
    }
    return shape;
}

namespace {

// Parameter/state tensor shapes for one layer given its per-sample input.
struct LayerAlloc {
    std::vector<std::vector<int>> params;
    std::vector<std::vector<int>> state;
};

LayerAlloc layer_alloc(const LayerSpec& spec, const std::vector<int>& input) {
    LayerAlloc a;
    switch (spec.kind) {
        case LayerKind::Conv2D:
            a.params = {{spec.kernel_h, spec.kernel_w, input[2], spec.out_channels},
                        {spec.out_channels}};
            break;
        case LayerKind::Dense:
            a.params = {{input[0], spec.units}, {spec.units}};
            break;
        case LayerKind::BatchNorm: {
            const int c = input.back();
            a.params = {{c}, {c}};
            a.state = {{c}, {c}};
            break;
        }
        default:
            break;
    }
    return a;
}

std::size_t count_scalars(const std::vector<LayerSpec>& layers, std::vector<int> shape) {
    std::size_t total = 0;
    for (const LayerSpec& spec : layers) {
        const LayerAlloc alloc = layer_alloc(spec, shape);
        for (const auto& s : alloc.params) total += Tensor<float>::numel_of(s);
        if (spec.kind == LayerKind::Residual) {
            total += count_scalars(spec.branch, shape);
            const std::vector<int> out = layer_output_shape(spec, shape);
            std::vector<int> branch_out = shape;
            for (const LayerSpec& inner : spec.branch) {
                branch_out = layer_output_shape(inner, branch_out);
            }
            if (!(branch_out == shape)) {
                // 1x1 projection shortcut.
                total += Tensor<float>::numel_of({1, 1, shape[2], spec.out_channels});
                total += Tensor<float>::numel_of({spec.out_channels});
            }
            shape = out;
        } else {
            shape = layer_output_shape(spec, shape);
        }
    }
    return total;
}

} // namespace

std::size_t parameter_count(const ModelConfig& config) {
    const std::vector<int> out = chain_output_shape(config.input_shape, config.layers);
    if (out != std::vector<int>{config.n_classes}) {
        throw ShapeError("model output shape " + shape_str(out) + " does not match " +
                         std::to_string(config.n_classes) + " classes");
    }
    return count_scalars(config.layers, config.input_shape);
}

// ---------------------------------------------------------------------------
// JSON serialization
// ---------------------------------------------------------------------------

namespace {

json layer_to_json(const LayerSpec& spec) {
    json j;
    j["kind"] = to_string(spec.kind);
    switch (spec.kind) {
        case LayerKind::Conv2D:
            j["out_channels"] = spec.out_channels;
            j["kernel"] = {spec.kernel_h, spec.kernel_w};
            j["stride"] = {spec.stride_h, spec.stride_w};
            j["same_pad"] = spec.same_pad;
            break;
        case LayerKind::MaxPool2D:
            j["pool"] = {spec.pool_h, spec.pool_w};
            break;
        case LayerKind::Dense:
            j["units"] = spec.units;
            break;
        case LayerKind::Dropout:
            j["rate"] = spec.rate;
            break;
        case LayerKind::BatchNorm:
            j["epsilon"] = spec.epsilon;
            j["momentum"] = spec.momentum;
            break;
        case LayerKind::Residual: {
            j["out_channels"] = spec.out_channels;
            j["stride"] = {spec.stride_h, spec.stride_w};
            json branch = json::array();
            for (const LayerSpec& inner : spec.branch) branch.push_back(layer_to_json(inner));
            j["branch"] = branch;
            break;
        }
        default:
            break;
    }
    return j;
}

int json_int(const json& j, const char* key) {
    if (!j.contains(key) || !j[key].is_number_integer()) {
        throw ConfigError(std::string("layer json: '") + key + "' must be an integer");
    }
    return j[key].get<int>();
}

double json_double(const json& j, const char* key) {
    if (!j.contains(key) || !j[key].is_number()) {
        throw ConfigError(std::string("layer json: '") + key + "' must be a number");
    }
    return j[key].get<double>();
}

std::pair<int, int> json_int_pair(const json& j, const char* key) {
    if (!j.contains(key) || !j[key].is_array() || j[key].size() != 2 ||
        !j[key][0].is_number_integer() || !j[key][1].is_number_integer()) {
        throw ConfigError(std::string("layer json: '") + key +
                          "' must be an array of two integers");
    }
    return {j[key][0].get<int>(), j[key][1].get<int>()};
}

void reject_unknown_keys(const json& j, const std::set<std::string>& known,
                         const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (known.count(it.key()) == 0) {
            throw ConfigError(where + ": unknown key '" + it.key() + "'");
        }
    }
}

LayerSpec layer_from_json(const json& j) {
    if (!j.is_object() || !j.contains("kind") || !j["kind"].is_string()) {
        throw ConfigError("layer json: each layer needs a string 'kind'");
    }
    LayerSpec spec;
    spec.kind = layer_kind_from_string(j["kind"].get<std::string>());
    switch (spec.kind) {
        case LayerKind::Conv2D:
            reject_unknown_keys(j, {"kind", "out_channels", "kernel", "stride", "same_pad"},
                                "conv2d");
            spec.out_channels = json_int(j, "out_channels");
            std::tie(spec.kernel_h, spec.kernel_w) = json_int_pair(j, "kernel");
            std::tie(spec.stride_h, spec.stride_w) = json_int_pair(j, "stride");
            if (!j.contains("same_pad") || !j["same_pad"].is_boolean()) {
                throw ConfigError("layer json: 'same_pad' must be a boolean");
            }
            spec.same_pad = j["same_pad"].get<bool>();
            break;
        case LayerKind::MaxPool2D:
            reject_unknown_keys(j, {"kind", "pool"}, "maxpool2d");
            std::tie(spec.pool_h, spec.pool_w) = json_int_pair(j, "pool");
            break;
        case LayerKind::Dense:
            reject_unknown_keys(j, {"kind", "units"}, "dense");
            spec.units = json_int(j, "units");
            break;
        case LayerKind::Dropout:
            reject_unknown_keys(j, {"kind", "rate"}, "dropout");
            spec.rate = json_double(j, "rate");
            break;
        case LayerKind::BatchNorm:
            reject_unknown_keys(j, {"kind", "epsilon", "momentum"}, "batchnorm");
            spec.epsilon = json_double(j, "epsilon");
            spec.momentum = json_double(j, "momentum");
            break;
        case LayerKind::Residual: {
            reject_unknown_keys(j, {"kind", "out_channels", "stride", "branch"}, "residual");
            spec.out_channels = json_int(j, "out_channels");
            std::tie(spec.stride_h, spec.stride_w) = json_int_pair(j, "stride");
            if (!j.contains("branch") || !j["branch"].is_array()) {
                throw ConfigError("layer json: 'branch' must be an array");
            }
            for (const json& inner : j["branch"]) spec.branch.push_back(layer_from_json(inner));
            break;
        }
        default:
            reject_unknown_keys(j, {"kind"}, to_string(spec.kind));
            break;
    }
    return spec;
}

} // namespace

std::string to_json(const ModelConfig& config) {
    json j;
    j["name"] = config.name;
    j["input_shape"] = config.input_shape;
    j["n_classes"] = config.n_classes;
    json layers = json::array();
    for (const LayerSpec& spec : config.layers) layers.push_back(layer_to_json(spec));
    j["layers"] = layers;
    return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model json: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("model json: top level must be an object");
    reject_unknown_keys(j, {"name", "input_shape", "n_classes", "layers"}, "model json");
    ModelConfig config;
    if (!j.contains("name") || !j["name"].is_string()) {
        throw ConfigError("model json: 'name' must be a string");
    }
    config.name = j["name"].get<std::string>();
    if (!j.contains("input_shape") || !j["input_shape"].is_array()) {
        throw ConfigError("model json: 'input_shape' must be an array");
    }
    for (const json& d : j["input_shape"]) {
        if (!d.is_number_integer()) {
            throw ConfigError("model json: 'input_shape' entries must be integers");
        }
        config.input_shape.push_back(d.get<int>());
    }
    config.n_classes = json_int(j, "n_classes");
    if (!j.contains("layers") || !j["layers"].is_array()) {
        throw ConfigError("model json: 'layers' must be an array");
    }
    for (const json& layer : j["layers"]) config.layers.push_back(layer_from_json(layer));
    return config;
}

// ---------------------------------------------------------------------------
// Model construction
// ---------------------------------------------------------------------------

namespace {

template <class T>
void init_conv_or_dense(LayerState<T>& layer, std::size_t fan_in, std::uint64_t seed,
                        std::uint64_t& ordinal) {
    Rng rng(Rng::derive(seed, ordinal++));
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (T& w : layer.params[0].values) w = static_cast<T>(rng.uniform(-limit, limit));
    // biases stay zero
}

template <class T>
std::vector<LayerState<T>> build_layers(const std::vector<LayerSpec>& specs,
                                        std::vector<int>& shape, std::uint64_t seed,
                                        std::uint64_t& ordinal) {
    std::vector<LayerState<T>> layers;
    for (const LayerSpec& spec : specs) {
        LayerState<T> layer;
        layer.spec = spec;
        const LayerAlloc alloc = layer_alloc(spec, shape);
        for (const auto& s : alloc.params) layer.params.emplace_back(s);
        for (const auto& s : alloc.state) layer.state.emplace_back(s);
        switch (spec.kind) {
            case LayerKind::Conv2D:
                init_conv_or_dense(layer,
                                   static_cast<std::size_t>(spec.kernel_h) *
                                       static_cast<std::size_t>(spec.kernel_w) *
                                       static_cast<std::size_t>(shape[2]),
                                   seed, ordinal);
                break;
            case LayerKind::Dense:
                init_conv_or_dense(layer, static_cast<std::size_t>(shape[0]), seed, ordinal);
                break;
            case LayerKind::BatchNorm:
                std::fill(layer.params[0].values.begin(), layer.params[0].values.end(), T(1));
                std::fill(layer.state[1].values.begin(), layer.state[1].values.end(), T(1));
                break;
            case LayerKind::Residual: {
                std::vector<int> branch_shape = shape;
                layer.branch = build_layers<T>(spec.branch, branch_shape, seed, ordinal);
                if (!(branch_shape == shape)) {
                    std::vector<LayerSpec> proj = {LayerSpec::conv2d(
                        spec.out_channels, 1, 1, true)};
                    proj[0].stride_h = spec.stride_h;
                    proj[0].stride_w = spec.stride_w;
                    std::vector<int> shortcut_shape = shape;
                    layer.shortcut =
                        build_layers<T>(proj, shortcut_shape, seed, ordinal);
                }
                break;
            }
            default:
                break;
        }
        shape = layer_output_shape(spec, shape);
        layers.push_back(std::move(layer));
    }
    return layers;
}

template <class T, class Fn>
void walk(std::vector<LayerState<T>>& layers, Fn&& fn) {
    for (LayerState<T>& layer : layers) {
        fn(layer);
        walk(layer.branch, fn);
        walk(layer.shortcut, fn);
    }
}

template <class T, class Fn>
void walk(const std::vector<LayerState<T>>& layers, Fn&& fn) {
    for (const LayerState<T>& layer : layers) {
        fn(layer);
        walk(layer.branch, fn);
        walk(layer.shortcut, fn);
    }
}

} // namespace

template <class T>
Model<T> make_model(const ModelConfig& config, std::uint64_t seed) {
    if (config.input_shape.empty()) throw ShapeError("model input shape must not be empty");
    const std::vector<int> out = chain_output_shape(config.input_shape, config.layers);
    if (out != std::vector<int>{config.n_classes}) {
        throw ShapeError("model output shape " + shape_str(out) + " does not match " +
                         std::to_string(config.n_classes) + " classes");
    }
    Model<T> model;
    model.config = config;
    model.init_seed = seed;
    std::vector<int> shape = config.input_shape;
    std::uint64_t ordinal = 0;
    model.layers = build_layers<T>(config.layers, shape, seed, ordinal);
    return model;
}

template <class T>
std::vector<Tensor<T>*> Model<T>::parameters() {
    std::vector<Tensor<T>*> out;
    walk(layers, [&out](LayerState<T>& l) {
        for (Tensor<T>& p : l.params) out.push_back(&p);
    });
    return out;
}

template <class T>
std::vector<const Tensor<T>*> Model<T>::parameters() const {
    std::vector<const Tensor<T>*> out;
    walk(layers, [&out](const LayerState<T>& l) {
        for (const Tensor<T>& p : l.params) out.push_back(&p);
    });
    return out;
}

template <class T>
std::vector<Tensor<T>*> Model<T>::buffers() {
    std::vector<Tensor<T>*> out;
    walk(layers, [&out](LayerState<T>& l) {
        for (Tensor<T>& p : l.params) out.push_back(&p);
        for (Tensor<T>& s : l.state) out.push_back(&s);
    });
    return out;
}

template <class T>
std::vector<const Tensor<T>*> Model<T>::buffers() const {
    std::vector<const Tensor<T>*> out;
    walk(layers, [&out](const LayerState<T>& l) {
        for (const Tensor<T>& p : l.params) out.push_back(&p);
        for (const Tensor<T>& s : l.state) out.push_back(&s);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

namespace {

template <class T>
Tensor<T> conv2d_forward(const LayerSpec& spec, const LayerState<T>& layer,
                         const Tensor<T>& x) {
    const int n = x.dim(0), ih = x.dim(1), iw = x.dim(2), ic = x.dim(3);
    const AxisGeom gh = conv_axis("conv2d", ih, spec.kernel_h, spec.stride_h, spec.same_pad);
    const AxisGeom gw = conv_axis("conv2d", iw, spec.kernel_w, spec.stride_w, spec.same_pad);
    const int oc = spec.out_channels;
    const Tensor<T>& w = layer.params[0];
    const Tensor<T>& b = layer.params[1];

    Tensor<T> y({n, gh.out, gw.out, oc});
    std::vector<T> acc(static_cast<std::size_t>(oc));
    for (int bn = 0; bn < n; ++bn) {
        for (int oh = 0; oh < gh.out; ++oh) {
            for (int ow = 0; ow < gw.out; ++ow) {
                std::copy(b.values.begin(), b.values.end(), acc.begin());
                for (int kh = 0; kh < spec.kernel_h; ++kh) {
                    const int y_in = oh * spec.stride_h - gh.pad_before + kh;
                    if (y_in < 0 || y_in >= ih) continue;
                    for (int kw = 0; kw < spec.kernel_w; ++kw) {
                        const int x_in = ow * spec.stride_w - gw.pad_before + kw;
                        if (x_in < 0 || x_in >= iw) continue;
                        const T* in_px =
                            &x.values[(static_cast<std::size_t>(bn) * ih + y_in) * iw *
                                          static_cast<std::size_t>(ic) +
                                      static_cast<std::size_t>(x_in) * ic];
                        const T* w_row =
                            &w.values[((static_cast<std::size_t>(kh) * spec.kernel_w + kw) *
                                       ic) *
                                      static_cast<std::size_t>(oc)];
                        for (int c = 0; c < ic; ++c) {
                            const T v = in_px[c];
                            const T* wr = w_row + static_cast<std::size_t>(c) * oc;
                            for (int o = 0; o < oc; ++o) acc[static_cast<std::size_t>(o)] += v * wr[o];
                        }
                    }
                }
                T* out_px = &y.values[((static_cast<std::size_t>(bn) * gh.out + oh) * gw.out +
                                       ow) *
                                      static_cast<std::size_t>(oc)];
                std::copy(acc.begin(), acc.end(), out_px);
            }
        }
    }
    return y;
}

template <class T>
Tensor<T> maxpool_forward(const LayerSpec& spec, const Tensor<T>& x,
                          std::vector<std::int32_t>& argmax) {
    const int n = x.dim(0), ih = x.dim(1), iw = x.dim(2), c = x.dim(3);
    const int oh = ih / spec.pool_h, ow = iw / spec.pool_w;
    Tensor<T> y({n, oh, ow, c});
    argmax.assign(y.numel(), 0);
    std::size_t oi = 0;
    for (int bn = 0; bn < n; ++bn) {
        for (int py = 0; py < oh; ++py) {
            for (int px = 0; px < ow; ++px) {
                for (int ch = 0; ch < c; ++ch, ++oi) {
                    T best = -std::numeric_limits<T>::infinity();
                    std::int32_t best_at = 0;
                    for (int ky = 0; ky < spec.pool_h; ++ky) {
                        for (int kx = 0; kx < spec.pool_w; ++kx) {
                            const int yy = py * spec.pool_h + ky;
                            const int xx = px * spec.pool_w + kx;
                            const std::size_t at =
                                ((static_cast<std::size_t>(bn) * ih + yy) * iw + xx) *
                                    static_cast<std::size_t>(c) +
                                static_cast<std::size_t>(ch);
                            // strict > keeps the first (row-major) maximum
                            if (x.values[at] > best) {
                                best = x.values[at];
                                best_at = static_cast<std::int32_t>(at);
                            }
                        }
                    }
                    y.values[oi] = best;
                    argmax[oi] = best_at;
                }
            }
        }
    }
    return y;
}

template <class T>
Tensor<T> dense_forward(const LayerState<T>& layer, const Tensor<T>& x) {
    const int n = x.dim(0), d = x.dim(1);
    const int u = layer.spec.units;
    const Tensor<T>& w = layer.params[0];
    const Tensor<T>& b = layer.params[1];
    Tensor<T> y({n, u});
    for (int bn = 0; bn < n; ++bn) {
        T* out_row = &y.values[static_cast<std::size_t>(bn) * u];
        std::copy(b.values.begin(), b.values.end(), out_row);
        const T* in_row = &x.values[static_cast<std::size_t>(bn) * d];
        for (int i = 0; i < d; ++i) {
            const T v = in_row[i];
            const T* w_row = &w.values[static_cast<std::size_t>(i) * u];
            for (int j = 0; j < u; ++j) out_row[j] += v * w_row[j];
        }
    }
    return y;
}

// Channel = innermost axis in every supported layout, so both (N,D) and
// (N,H,W,C) statistics reduce over "rows" of the innermost extent.
template <class T>
Tensor<T> batchnorm_forward(const LayerSpec& spec, LayerState<T>& layer, const Tensor<T>& x,
                            Mode mode, LayerCache<T>& cache) {
    const int c = x.shape.back();
    const std::size_t rows = x.numel() / static_cast<std::size_t>(c);
    Tensor<T>& gamma = layer.params[0];
    Tensor<T>& beta = layer.params[1];
    Tensor<T>& run_mean = layer.state[0];
    Tensor<T>& run_var = layer.state[1];

    Tensor<T> mean({c}), var({c});
    if (mode == Mode::Train) {
        std::vector<double> sum(static_cast<std::size_t>(c), 0.0);
        std::vector<double> sq(static_cast<std::size_t>(c), 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
            const T* row = &x.values[r * static_cast<std::size_t>(c)];
            for (int ch = 0; ch < c; ++ch) {
                const double v = static_cast<double>(row[ch]);
                sum[static_cast<std::size_t>(ch)] += v;
                sq[static_cast<std::size_t>(ch)] += v * v;
            }
        }
        for (int ch = 0; ch < c; ++ch) {
            const double m = sum[static_cast<std::size_t>(ch)] / static_cast<double>(rows);
            const double v =
                std::max(0.0, sq[static_cast<std::size_t>(ch)] / static_cast<double>(rows) -
                                  m * m);
            mean.values[static_cast<std::size_t>(ch)] = static_cast<T>(m);
            var.values[static_cast<std::size_t>(ch)] = static_cast<T>(v);
            run_mean.values[static_cast<std::size_t>(ch)] = static_cast<T>(
                spec.momentum * static_cast<double>(run_mean.values[static_cast<std::size_t>(ch)]) +
                (1.0 - spec.momentum) * m);
            run_var.values[static_cast<std::size_t>(ch)] = static_cast<T>(
                spec.momentum * static_cast<double>(run_var.values[static_cast<std::size_t>(ch)]) +
                (1.0 - spec.momentum) * v);
        }
    } else {
        mean = run_mean;
        var = run_var;
    }

    Tensor<T> y(x.shape);
    Tensor<T> xhat(x.shape);
    std::vector<T> inv(static_cast<std::size_t>(c));
    for (int ch = 0; ch < c; ++ch) {
        inv[static_cast<std::size_t>(ch)] = static_cast<T>(
            1.0 / std::sqrt(static_cast<double>(var.values[static_cast<std::size_t>(ch)]) +
                            spec.epsilon));
    }
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * static_cast<std::size_t>(c);
        for (int ch = 0; ch < c; ++ch) {
            const std::size_t at = base + static_cast<std::size_t>(ch);
            const T xh = (x.values[at] - mean.values[static_cast<std::size_t>(ch)]) *
                         inv[static_cast<std::size_t>(ch)];
            xhat.values[at] = xh;
            y.values[at] = gamma.values[static_cast<std::size_t>(ch)] * xh +
                           beta.values[static_cast<std::size_t>(ch)];
        }
    }
    cache.normalized = std::move(xhat);
    cache.mean = std::move(mean);
    cache.var = std::move(var);
    return y;
}

template <class T>
Tensor<T> forward_layers(std::vector<LayerState<T>>& layers, Tensor<T> x, Mode mode,
                         std::uint64_t rng_seed, std::uint64_t& dropout_ordinal,
                         std::vector<LayerCache<T>>& caches) {
    caches.clear();
    caches.resize(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
        LayerState<T>& layer = layers[i];
        LayerCache<T>& cache = caches[i];
        const LayerSpec& spec = layer.spec;
        const std::string where =
            "layer " + std::to_string(i) + " (" + to_string(spec.kind) + ")";
        switch (spec.kind) {
            case LayerKind::Conv2D: {
                if (x.shape.size() != 4 || x.dim(3) != layer.params[0].dim(2)) {
                    shape_fail(where, "input " + shape_str(x.shape) + " incompatible");
                }
                cache.input = std::move(x);
                x = conv2d_forward(spec, layer, cache.input);
                break;
            }
            case LayerKind::MaxPool2D: {
                if (x.shape.size() != 4) shape_fail(where, "needs a 4-D input");
                cache.input.shape = x.shape; // values not needed for backward
                x = maxpool_forward(spec, x, cache.argmax);
                break;
            }
            case LayerKind::Dense: {
                if (x.shape.size() != 2 || x.dim(1) != layer.params[0].dim(0)) {
                    shape_fail(where, "input " + shape_str(x.shape) + " incompatible");
                }
                cache.input = std::move(x);
                x = dense_forward(layer, cache.input);
                break;
            }
            case LayerKind::ReLU: {
                cache.mask.resize(x.numel());
                for (std::size_t v = 0; v < x.numel(); ++v) {
                    const bool positive = x.values[v] > T(0);
                    cache.mask[v] = positive ? 1 : 0;
                    if (!positive) x.values[v] = T(0);
                }
                break;
            }
            case LayerKind::Dropout: {
                if (mode == Mode::Train) {
                    Rng rng(Rng::derive(rng_seed, 0x5eed0000 + dropout_ordinal));
                    cache.mask.resize(x.numel());
                    const T scale = static_cast<T>(1.0 / (1.0 - spec.rate));
                    for (std::size_t v = 0; v < x.numel(); ++v) {
                        const bool keep = rng.uniform() >= spec.rate;
                        cache.mask[v] = keep ? 1 : 0;
                        x.values[v] = keep ? x.values[v] * scale : T(0);
                    }
                }
                ++dropout_ordinal;
                break;
            }
            case LayerKind::Flatten: {
                const int n = x.dim(0);
                int rest = 1;
                for (std::size_t d = 1; d < x.shape.size(); ++d) rest *= x.dim(static_cast<int>(d));
                cache.input.shape = x.shape; // only the shape matters for backward
                x.shape = {n, rest};
                break;
            }
            case LayerKind::BatchNorm: {
                if (x.shape.size() != 2 && x.shape.size() != 4) {
                    shape_fail(where, "needs a 2-D or 4-D input");
                }
                if (x.shape.back() != layer.params[0].dim(0)) {
                    shape_fail(where, "input " + shape_str(x.shape) + " incompatible");
                }
                cache.input = std::move(x);
                x = batchnorm_forward(spec, layer, cache.input, mode, cache);
                break;
            }
            case LayerKind::GlobalAvgPool: {
                if (x.shape.size() != 4) shape_fail(where, "needs a 4-D input");
                const int n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
                Tensor<T> y({n, c});
                const double denom = static_cast<double>(h) * static_cast<double>(w);
                for (int bn = 0; bn < n; ++bn) {
                    for (int ch = 0; ch < c; ++ch) {
                        double s = 0.0;
                        for (int yy = 0; yy < h; ++yy) {
                            for (int xx = 0; xx < w; ++xx) {
                                s += static_cast<double>(
                                    x.values[((static_cast<std::size_t>(bn) * h + yy) * w + xx) *
                                                 static_cast<std::size_t>(c) +
                                             static_cast<std::size_t>(ch)]);
                            }
                        }
                        y.values[static_cast<std::size_t>(bn) * c +
                                 static_cast<std::size_t>(ch)] = static_cast<T>(s / denom);
                    }
                }
                cache.input.shape = x.shape;
                x = std::move(y);
                break;
            }
            case LayerKind::Residual: {
                if (x.shape.size() != 4) shape_fail(where, "needs a 4-D input");
                cache.input.shape = x.shape;
                Tensor<T> shortcut_out;
                if (layer.shortcut.empty()) {
                    shortcut_out = x;
                } else {
                    shortcut_out = forward_layers(layer.shortcut, x, mode, rng_seed,
                                                  dropout_ordinal, cache.shortcut);
                }
                Tensor<T> branch_out = forward_layers(layer.branch, std::move(x), mode,
                                                      rng_seed, dropout_ordinal, cache.branch);
                if (branch_out.shape != shortcut_out.shape) {
                    shape_fail(where, "branch/shortcut outputs differ");
                }
                for (std::size_t v = 0; v < branch_out.numel(); ++v) {
                    branch_out.values[v] += shortcut_out.values[v];
                }
                x = std::move(branch_out);
                break;
            }
        }
    }
    return x;
}

} // namespace

template <class T>
std::pair<Tensor<T>, Cache<T>> forward(Model<T>& model, const Tensor<T>& batch, Mode mode,
                                       std::uint64_t rng_seed) {
    if (batch.shape.size() != model.config.input_shape.size() + 1) {
        throw ShapeError("batch rank " + std::to_string(batch.shape.size()) +
                         " does not match model input " +
                         shape_str(model.config.input_shape));
    }
    for (std::size_t d = 0; d < model.config.input_shape.size(); ++d) {
        if (batch.shape[d + 1] != model.config.input_shape[d]) {
            throw ShapeError("batch sample shape does not match model input " +
                             shape_str(model.config.input_shape));
        }
    }
    Cache<T> cache;
    cache.mode = mode;
    cache.param_version = model.param_version;
    std::uint64_t dropout_ordinal = 0;
    Tensor<T> logits =
        forward_layers(model.layers, batch, mode, rng_seed, dropout_ordinal, cache.layers);
    assert_finite(logits, "forward");
    cache.valid = true;
    return {std::move(logits), std::move(cache)};
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

template <class T>
std::pair<double, Tensor<T>> loss_softmax_ce(const Tensor<T>& logits,
                                             const std::vector<int>& labels) {
    if (logits.shape.size() != 2) throw ShapeError("logits must be (batch, n_classes)");
    const int n = logits.dim(0), c = logits.dim(1);
    if (static_cast<std::size_t>(n) != labels.size()) {
        throw ShapeError("label count " + std::to_string(labels.size()) +
                         " does not match batch size " + std::to_string(n));
    }
    double loss = 0.0;
    Tensor<T> grad(logits.shape);
    for (int row = 0; row < n; ++row) {
        const int label = labels[static_cast<std::size_t>(row)];
        if (label < 0 || label >= c) {
            throw LabelError("label " + std::to_string(label) + " outside [0, " +
                             std::to_string(c) + ")");
        }
        const T* x = &logits.values[static_cast<std::size_t>(row) * c];
        double max_logit = static_cast<double>(x[0]);
        for (int j = 1; j < c; ++j) max_logit = std::max(max_logit, static_cast<double>(x[j]));
        double sum_exp = 0.0;
        for (int j = 0; j < c; ++j) sum_exp += std::exp(static_cast<double>(x[j]) - max_logit);
        const double lse = max_logit + std::log(sum_exp);
        loss += lse - static_cast<double>(x[label]);
        T* g = &grad.values[static_cast<std::size_t>(row) * c];
        for (int j = 0; j < c; ++j) {
            const double softmax = std::exp(static_cast<double>(x[j]) - max_logit) / sum_exp;
            const double one_hot = (j == label) ? 1.0 : 0.0;
            g[j] = static_cast<T>((softmax - one_hot) / static_cast<double>(n));
        }
    }
    loss /= static_cast<double>(n);
    assert_finite(grad, "loss gradient");
    return {loss, std::move(grad)};
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

namespace {

template <class T>
struct LayerGrads {
    std::vector<Tensor<T>> params;
    std::vector<LayerGrads<T>> branch;
    std::vector<LayerGrads<T>> shortcut;
};

template <class T>
Tensor<T> conv2d_backward(const LayerSpec& spec, const LayerState<T>& layer,
                          const Tensor<T>& x, const Tensor<T>& dout,
                          std::vector<Tensor<T>>& grads) {
    const int n = x.dim(0), ih = x.dim(1), iw = x.dim(2), ic = x.dim(3);
    const AxisGeom gh = conv_axis("conv2d", ih, spec.kernel_h, spec.stride_h, spec.same_pad);
    const AxisGeom gw = conv_axis("conv2d", iw, spec.kernel_w, spec.stride_w, spec.same_pad);
    const int oc = spec.out_channels;
    const Tensor<T>& w = layer.params[0];

    grads.assign(2, Tensor<T>());
    grads[0] = Tensor<T>(w.shape);
    grads[1] = Tensor<T>(layer.params[1].shape);
    Tensor<T> dx(x.shape);

    Tensor<T>& dw = grads[0];
    Tensor<T>& db = grads[1];
    for (int bn = 0; bn < n; ++bn) {
        for (int oh = 0; oh < gh.out; ++oh) {
            for (int ow = 0; ow < gw.out; ++ow) {
                const T* g = &dout.values[((static_cast<std::size_t>(bn) * gh.out + oh) *
                                               gw.out +
                                           ow) *
                                          static_cast<std::size_t>(oc)];
                for (int o = 0; o < oc; ++o) db.values[static_cast<std::size_t>(o)] += g[o];
                for (int kh = 0; kh < spec.kernel_h; ++kh) {
                    const int y_in = oh * spec.stride_h - gh.pad_before + kh;
                    if (y_in < 0 || y_in >= ih) continue;
                    for (int kw = 0; kw < spec.kernel_w; ++kw) {
                        const int x_in = ow * spec.stride_w - gw.pad_before + kw;
                        if (x_in < 0 || x_in >= iw) continue;
                        const std::size_t px_at =
                            ((static_cast<std::size_t>(bn) * ih + y_in) * iw + x_in) *
                            static_cast<std::size_t>(ic);
                        const std::size_t w_at =
                            ((static_cast<std::size_t>(kh) * spec.kernel_w + kw) * ic) *
                            static_cast<std::size_t>(oc);
                        for (int c = 0; c < ic; ++c) {
                            const T in_v = x.values[px_at + static_cast<std::size_t>(c)];
                            T* dw_row = &dw.values[w_at + static_cast<std::size_t>(c) * oc];
                            const T* w_row = &w.values[w_at + static_cast<std::size_t>(c) * oc];
                            T acc = T(0);
                            for (int o = 0; o < oc; ++o) {
                                dw_row[o] += in_v * g[o];
                                acc += w_row[o] * g[o];
                            }
                            dx.values[px_at + static_cast<std::size_t>(c)] += acc;
                        }
                    }
                }
            }
        }
    }
    return dx;
}

template <class T>
Tensor<T> dense_backward(const LayerState<T>& layer, const Tensor<T>& x, const Tensor<T>& dout,
                         std::vector<Tensor<T>>& grads) {
    const int n = x.dim(0), d = x.dim(1);
    const int u = layer.spec.units;
    const Tensor<T>& w = layer.params[0];
    grads.assign(2, Tensor<T>());
    grads[0] = Tensor<T>(w.shape);
    grads[1] = Tensor<T>(layer.params[1].shape);
    Tensor<T> dx(x.shape);

    for (int bn = 0; bn < n; ++bn) {
        const T* in_row = &x.values[static_cast<std::size_t>(bn) * d];
        const T* g = &dout.values[static_cast<std::size_t>(bn) * u];
        for (int j = 0; j < u; ++j) grads[1].values[static_cast<std::size_t>(j)] += g[j];
        for (int i = 0; i < d; ++i) {
            T* dw_row = &grads[0].values[static_cast<std::size_t>(i) * u];
            const T* w_row = &w.values[static_cast<std::size_t>(i) * u];
            const T in_v = in_row[i];
            T acc = T(0);
            for (int j = 0; j < u; ++j) {
                dw_row[j] += in_v * g[j];
                acc += w_row[j] * g[j];
            }
            dx.values[static_cast<std::size_t>(bn) * d + static_cast<std::size_t>(i)] = acc;
        }
    }
    return dx;
}

template <class T>
Tensor<T> batchnorm_backward(const LayerSpec& spec, const LayerState<T>& layer,
                             const LayerCache<T>& cache, const Tensor<T>& dout, Mode mode,
                             std::vector<Tensor<T>>& grads) {
    const Tensor<T>& x = cache.input;
    const int c = x.shape.back();
    const std::size_t rows = x.numel() / static_cast<std::size_t>(c);
    const Tensor<T>& gamma = layer.params[0];

    grads.assign(2, Tensor<T>());
    grads[0] = Tensor<T>(gamma.shape);
    grads[1] = Tensor<T>(layer.params[1].shape);
    Tensor<T> dx(x.shape);

    std::vector<double> inv(static_cast<std::size_t>(c));
    for (int ch = 0; ch < c; ++ch) {
        inv[static_cast<std::size_t>(ch)] =
            1.0 / std::sqrt(static_cast<double>(cache.var.values[static_cast<std::size_t>(ch)]) +
                            spec.epsilon);
    }

    // dgamma / dbeta are shared between modes.
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * static_cast<std::size_t>(c);
        for (int ch = 0; ch < c; ++ch) {
            const std::size_t at = base + static_cast<std::size_t>(ch);
            grads[0].values[static_cast<std::size_t>(ch)] +=
                dout.values[at] * cache.normalized.values[at];
            grads[1].values[static_cast<std::size_t>(ch)] += dout.values[at];
        }
    }

    if (mode == Mode::Eval) {
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t base = r * static_cast<std::size_t>(c);
            for (int ch = 0; ch < c; ++ch) {
                const std::size_t at = base + static_cast<std::size_t>(ch);
                dx.values[at] = static_cast<T>(
                    static_cast<double>(dout.values[at]) *
                    static_cast<double>(gamma.values[static_cast<std::size_t>(ch)]) *
                    inv[static_cast<std::size_t>(ch)]);
            }
        }
        return dx;
    }

    // Train mode: gradients flow through the batch statistics too.
    const double m = static_cast<double>(rows);
    std::vector<double> sum_dxhat(static_cast<std::size_t>(c), 0.0);
    std::vector<double> sum_dxhat_xhat(static_cast<std::size_t>(c), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * static_cast<std::size_t>(c);
        for (int ch = 0; ch < c; ++ch) {
            const std::size_t at = base + static_cast<std::size_t>(ch);
            const double dxhat = static_cast<double>(dout.values[at]) *
                                 static_cast<double>(gamma.values[static_cast<std::size_t>(ch)]);
            sum_dxhat[static_cast<std::size_t>(ch)] += dxhat;
            sum_dxhat_xhat[static_cast<std::size_t>(ch)] +=
                dxhat * static_cast<double>(cache.normalized.values[at]);
        }
    }
    // dx = inv/m * (m*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * static_cast<std::size_t>(c);
        for (int ch = 0; ch < c; ++ch) {
            const std::size_t at = base + static_cast<std::size_t>(ch);
            const double dxhat = static_cast<double>(dout.values[at]) *
                                 static_cast<double>(gamma.values[static_cast<std::size_t>(ch)]);
            const double xhat = static_cast<double>(cache.normalized.values[at]);
            dx.values[at] = static_cast<T>(
                inv[static_cast<std::size_t>(ch)] / m *
                (m * dxhat - sum_dxhat[static_cast<std::size_t>(ch)] -
                 xhat * sum_dxhat_xhat[static_cast<std::size_t>(ch)]));
        }
    }
    return dx;
}

template <class T>
Tensor<T> backward_layers(std::vector<LayerState<T>>& layers,
                          const std::vector<LayerCache<T>>& caches, Tensor<T> dout, Mode mode,
                          std::vector<LayerGrads<T>>& grads) {
    grads.clear();
    grads.resize(layers.size());
    for (std::size_t idx = layers.size(); idx-- > 0;) {
        LayerState<T>& layer = layers[idx];
        const LayerCache<T>& cache = caches[idx];
        const LayerSpec& spec = layer.spec;
        switch (spec.kind) {
            case LayerKind::Conv2D:
                dout = conv2d_backward(spec, layer, cache.input, dout, grads[idx].params);
                break;
            case LayerKind::MaxPool2D: {
                Tensor<T> dx(cache.input.shape);
                for (std::size_t i = 0; i < cache.argmax.size(); ++i) {
                    dx.values[static_cast<std::size_t>(cache.argmax[i])] += dout.values[i];
                }
                dout = std::move(dx);
                break;
            }
            case LayerKind::Dense:
                dout = dense_backward(layer, cache.input, dout, grads[idx].params);
                break;
            case LayerKind::ReLU: {
                for (std::size_t i = 0; i < dout.numel(); ++i) {
                    if (!cache.mask[i]) dout.values[i] = T(0);
                }
                break;
            }
            case LayerKind::Dropout: {
                if (mode == Mode::Train) {
                    const T scale = static_cast<T>(1.0 / (1.0 - spec.rate));
                    for (std::size_t i = 0; i < dout.numel(); ++i) {
                        dout.values[i] = cache.mask[i] ? dout.values[i] * scale : T(0);
                    }
                }
                break;
            }
            case LayerKind::Flatten:
                dout.shape = cache.input.shape;
                break;
            case LayerKind::BatchNorm:
                dout = batchnorm_backward(spec, layer, cache, dout, mode, grads[idx].params);
                break;
            case LayerKind::GlobalAvgPool: {
                const int n = cache.input.dim(0), h = cache.input.dim(1),
                          w = cache.input.dim(2), c = cache.input.dim(3);
                Tensor<T> dx(cache.input.shape);
                const T denom = static_cast<T>(static_cast<double>(h) * static_cast<double>(w));
                for (int bn = 0; bn < n; ++bn) {
                    for (int ch = 0; ch < c; ++ch) {
                        const T g = dout.values[static_cast<std::size_t>(bn) * c +
                                                static_cast<std::size_t>(ch)] /
                                    denom;
                        for (int yy = 0; yy < h; ++yy) {
                            for (int xx = 0; xx < w; ++xx) {
                                dx.values[((static_cast<std::size_t>(bn) * h + yy) * w + xx) *
                                              static_cast<std::size_t>(c) +
                                          static_cast<std::size_t>(ch)] = g;
                            }
                        }
                    }
                }
                dout = std::move(dx);
                break;
            }
            case LayerKind::Residual: {
                Tensor<T> dbranch_in = backward_layers(layer.branch, cache.branch, dout, mode,
                                                       grads[idx].branch);
                Tensor<T> dshort_in;
                if (layer.shortcut.empty()) {
                    dshort_in = std::move(dout);
                } else {
                    dshort_in = backward_layers(layer.shortcut, cache.shortcut, std::move(dout),
                                                mode, grads[idx].shortcut);
                }
                for (std::size_t i = 0; i < dbranch_in.numel(); ++i) {
                    dbranch_in.values[i] += dshort_in.values[i];
                }
                dout = std::move(dbranch_in);
                break;
            }
        }
    }
    return dout;
}

template <class T>
void flatten_grads(const std::vector<LayerState<T>>& layers, std::vector<LayerGrads<T>>& tree,
                   std::vector<Tensor<T>>& out) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
        // Layers without parameters produced no grad tensors; keep alignment
        // with Model::parameters() by emitting one tensor per parameter.
        for (std::size_t p = 0; p < layers[i].params.size(); ++p) {
            if (p < tree[i].params.size()) {
                out.push_back(std::move(tree[i].params[p]));
            } else {
                out.push_back(Tensor<T>(layers[i].params[p].shape));
            }
        }
        flatten_grads(layers[i].branch, tree[i].branch, out);
        flatten_grads(layers[i].shortcut, tree[i].shortcut, out);
    }
}

} // namespace

template <class T>
std::vector<Tensor<T>> backward(Model<T>& model, const Cache<T>& cache,
                                const Tensor<T>& dlogits) {
    if (!cache.valid) throw CacheError("backward called without a matching forward");
    if (cache.param_version != model.param_version) {
        throw CacheError("stale activation cache: parameters changed since forward");
    }
    std::vector<LayerGrads<T>> tree;
    backward_layers(model.layers, cache.layers, dlogits, cache.mode, tree);
    std::vector<Tensor<T>> grads;
    flatten_grads(model.layers, tree, grads);
    for (const Tensor<T>& g : grads) assert_finite(g, "backward");
    return grads;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <class T>
AdamState<T> make_adam_state(const Model<T>& model, AdamConfig config) {
    AdamState<T> state;
    state.config = config;
    for (const Tensor<T>* p : model.parameters()) {
        state.m.emplace_back(p->shape);
        state.v.emplace_back(p->shape);
    }
    return state;
}

template <class T>
void adam_step(Model<T>& model, const std::vector<Tensor<T>>& gradients,
               AdamState<T>& state) {
    std::vector<Tensor<T>*> params = model.parameters();
    if (params.size() != gradients.size() || params.size() != state.m.size()) {
        throw ShapeError("adam: gradient/state count does not match parameter count");
    }
    const AdamConfig& c = state.config;
    ++state.step;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor<T>& p = *params[i];
        const Tensor<T>& g = gradients[i];
        if (g.shape != p.shape) {
            throw ShapeError("adam: gradient " + std::to_string(i) + " shape " +
                             shape_str(g.shape) + " does not match parameter " +
                             shape_str(p.shape));
        }
        Tensor<T>& m = state.m[i];
        Tensor<T>& v = state.v[i];
        for (std::size_t j = 0; j < p.numel(); ++j) {
            const double gj = static_cast<double>(g.values[j]);
            const double mj = c.beta1 * static_cast<double>(m.values[j]) + (1.0 - c.beta1) * gj;
            const double vj =
                c.beta2 * static_cast<double>(v.values[j]) + (1.0 - c.beta2) * gj * gj;
            m.values[j] = static_cast<T>(mj);
            v.values[j] = static_cast<T>(vj);
            const double update =
                c.learning_rate * (mj / bc1) / (std::sqrt(vj / bc2) + c.epsilon);
            p.values[j] = static_cast<T>(static_cast<double>(p.values[j]) - update);
        }
        assert_finite(p, "adam_step");
    }
    ++model.param_version;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

double grad_check(Model<double>& model, const Tensor<double>& batch,
                  const std::vector<int>& labels, GradCheckOptions options) {
    // Parameter tensors grouped by owning layer, in declaration order.
    std::vector<std::vector<Tensor<double>*>> by_layer;
    walk(model.layers, [&by_layer](LayerState<double>& l) {
        if (!l.params.empty()) {
            std::vector<Tensor<double>*> group;
            for (Tensor<double>& p : l.params) group.push_back(&p);
            by_layer.push_back(std::move(group));
        }
    });

    auto loss_of = [&]() {
        auto [logits, cache] = forward(model, batch, Mode::Train, options.rng_seed);
        return loss_softmax_ce(logits, labels).first;
    };

    auto [logits, cache] = forward(model, batch, Mode::Train, options.rng_seed);
    auto [loss, dlogits] = loss_softmax_ce(logits, labels);
    (void)loss;
    std::vector<Tensor<double>> grads = backward(model, cache, dlogits);

    // Map each (layer, tensor) pair back to its flat gradient index.
    std::vector<std::vector<std::size_t>> grad_index(by_layer.size());
    {
        std::map<const Tensor<double>*, std::size_t> flat;
        std::size_t i = 0;
        for (Tensor<double>* p : model.parameters()) flat[p] = i++;
        for (std::size_t l = 0; l < by_layer.size(); ++l) {
            for (Tensor<double>* p : by_layer[l]) grad_index[l].push_back(flat.at(p));
        }
    }

    if (options.corrupt_layer >= 0 &&
        static_cast<std::size_t>(options.corrupt_layer) < by_layer.size()) {
        for (std::size_t gi : grad_index[static_cast<std::size_t>(options.corrupt_layer)]) {
            for (double& g : grads[gi].values) g += 1.0 + std::abs(g);
        }
    }

    double max_rel = 0.0;
    for (std::size_t l = 0; l < by_layer.size(); ++l) {
        std::size_t layer_numel = 0;
        for (Tensor<double>* p : by_layer[l]) layer_numel += p->numel();
        const std::size_t n_samples =
            std::min<std::size_t>(layer_numel, static_cast<std::size_t>(options.samples_per_layer));

        Rng rng(Rng::derive(options.rng_seed, 0xc4ec0000 + l));
        std::set<std::size_t> chosen;
        while (chosen.size() < n_samples) chosen.insert(rng.below(layer_numel));

        for (std::size_t flat_at : chosen) {
            std::size_t t = 0;
            std::size_t offset = flat_at;
            while (offset >= by_layer[l][t]->numel()) {
                offset -= by_layer[l][t]->numel();
                ++t;
            }
            double& param = by_layer[l][t]->values[offset];
            const double saved = param;
            auto central_fd = [&](double eps) {
                param = saved + eps;
                const double loss_plus = loss_of();
                param = saved - eps;
                const double loss_minus = loss_of();
                param = saved;
                return (loss_plus - loss_minus) / (2.0 * eps);
            };
            const double analytic = grads[grad_index[l][t]].values[offset];
            auto rel_of = [&](double fd) {
                return std::abs(analytic - fd) /
                       std::max({std::abs(analytic), std::abs(fd), 1e-6});
            };

            double eps = options.epsilon;
            double rel = rel_of(central_fd(eps));
            // A ReLU or max-pool kink inside the difference window inflates
            // the estimate even when the analytic gradient is exact. Halving
            // the step moves the window off the kink, while a genuinely wrong
            // gradient keeps disagreeing at every step size. Stop near the
            // 64-bit roundoff floor for central differences.
            while (rel > 1e-4 && eps > 2e-7) {
                eps *= 0.5;
                rel = rel_of(central_fd(eps));
            }
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

template <class T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model) {
    const std::vector<const Tensor<T>*> buffers = model.buffers();
    std::size_t total_values = 0;
    for (const Tensor<T>* b : buffers) total_values += b->numel();

    json header;
    header["format_version"] = kCheckpointFormatVersion;
    header["model"] = json::parse(to_json(model.config));
    header["init_seed"] = model.init_seed;
    header["dtype"] = "f32";
    header["value_count"] = total_values;

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << header.dump() << '\n';
    std::vector<float> scratch;
    for (const Tensor<T>* b : buffers) {
        scratch.resize(b->numel());
        for (std::size_t i = 0; i < b->numel(); ++i) {
            scratch[i] = static_cast<float>(b->values[i]);
        }
        out.write(reinterpret_cast<const char*>(scratch.data()),
                  static_cast<std::streamsize>(scratch.size() * sizeof(float)));
    }
    if (!out.flush()) throw IoError("failed writing " + path.string());
}

template <class T>
Model<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::string header_line;
    if (!std::getline(in, header_line)) throw DecodeError("checkpoint: missing header line");

    json header;
    try {
        header = json::parse(header_line);
    } catch (const json::exception& e) {
        throw DecodeError(std::string("checkpoint: bad header: ") + e.what());
    }
    if (!header.is_object() || !header.contains("format_version") ||
        !header["format_version"].is_number_unsigned() ||
        header["format_version"].get<std::uint32_t>() != kCheckpointFormatVersion) {
        throw DecodeError("checkpoint: unsupported format version");
    }
    if (!header.contains("dtype") || header["dtype"] != "f32") {
        throw DecodeError("checkpoint: unsupported dtype");
    }
    if (!header.contains("model") || !header.contains("init_seed") ||
        !header["init_seed"].is_number_unsigned() || !header.contains("value_count") ||
        !header["value_count"].is_number_unsigned()) {
        throw DecodeError("checkpoint: incomplete header");
    }
    const ModelConfig config = model_config_from_json(header["model"].dump());
    Model<T> model = make_model<T>(config, header["init_seed"].get<std::uint64_t>());

    std::vector<Tensor<T>*> buffers = model.buffers();
    std::size_t total_values = 0;
    for (const Tensor<T>* b : buffers) total_values += b->numel();
    if (header["value_count"].get<std::size_t>() != total_values) {
        throw DecodeError("checkpoint: value count does not match the model architecture");
    }
    std::vector<float> scratch;
    for (Tensor<T>* b : buffers) {
        scratch.resize(b->numel());
        in.read(reinterpret_cast<char*>(scratch.data()),
                static_cast<std::streamsize>(scratch.size() * sizeof(float)));
        if (static_cast<std::size_t>(in.gcount()) != scratch.size() * sizeof(float)) {
            throw DecodeError("checkpoint: truncated parameter data");
        }
        for (std::size_t i = 0; i < scratch.size(); ++i) {
            b->values[i] = static_cast<T>(scratch[i]);
        }
    }
    char extra;
    if (in.read(&extra, 1); in.gcount() != 0) {
        throw DecodeError("checkpoint: trailing bytes after parameter data");
    }
    return model;
}

// ---------------------------------------------------------------------------
// Explicit instantiations
// ---------------------------------------------------------------------------

template struct Model<float>;
template struct Model<double>;

template Model<float> make_model<float>(const ModelConfig&, std::uint64_t);
template Model<double> make_model<double>(const ModelConfig&, std::uint64_t);

template std::pair<Tensor<float>, Cache<float>> forward(Model<float>&, const Tensor<float>&,
                                                        Mode, std::uint64_t);
template std::pair<Tensor<double>, Cache<double>> forward(Model<double>&,
                                                          const Tensor<double>&, Mode,
                                                          std::uint64_t);

template std::pair<double, Tensor<float>> loss_softmax_ce(const Tensor<float>&,
                                                          const std::vector<int>&);
template std::pair<double, Tensor<double>> loss_softmax_ce(const Tensor<double>&,
                                                           const std::vector<int>&);

template std::vector<Tensor<float>> backward(Model<float>&, const Cache<float>&,
                                             const Tensor<float>&);
template std::vector<Tensor<double>> backward(Model<double>&, const Cache<double>&,
                                              const Tensor<double>&);

template AdamState<float> make_adam_state(const Model<float>&, AdamConfig);
template AdamState<double> make_adam_state(const Model<double>&, AdamConfig);

template void adam_step(Model<float>&, const std::vector<Tensor<float>>&, AdamState<float>&);
template void adam_step(Model<double>&, const std::vector<Tensor<double>>&,
                        AdamState<double>&);

template void save_checkpoint(const std::filesystem::path&, const Model<float>&);
template void save_checkpoint(const std::filesystem::path&, const Model<double>&);
template Model<float> load_checkpoint<float>(const std::filesystem::path&);
template Model<double> load_checkpoint<double>(const std::filesystem::path&);

} // namespace ser::nn
