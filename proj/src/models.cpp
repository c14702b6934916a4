#include "ser/models.hpp"

#include <string>

#include "ser/error.hpp"

namespace ser::models {

namespace {

using nn::LayerSpec;
using nn::ModelConfig;

void check_input(const std::vector<int>& input_shape, int n_classes,
                 const std::string& name) {
    if (input_shape.size() != 3) {
        throw ShapeError(name + ": input shape must be (rows, frames, channels)");
    }
    for (int d : input_shape) {
        if (d <= 0) throw ShapeError(name + ": input dimensions must be positive");
    }
    if (input_shape[1] < 16) {
        throw ShapeError(name + ": needs at least 16 frames, got " +
                         std::to_string(input_shape[1]));
    }
    if (n_classes < 2) {
        throw ConfigError(name + ": needs at least two classes");
    }
}

ModelConfig finish(ModelConfig config) {
    // Forces the end-to-end shape check so malformed inputs fail here.
    (void)nn::parameter_count(config);
    return config;
}

} // namespace

ModelConfig build_vgge(const std::vector<int>& input_shape, int n_classes) {
    check_input(input_shape, n_classes, "VGGE");
    ModelConfig config;
    config.name = "VGGE";
    config.input_shape = input_shape;
    config.n_classes = n_classes;
    for (int width : {32, 64, 128, 256}) {
        config.layers.push_back(LayerSpec::conv2d(width, 3));
        config.layers.push_back(LayerSpec::relu());
        config.layers.push_back(LayerSpec::maxpool2());
    }
    config.layers.push_back(LayerSpec::flatten());
    config.layers.push_back(LayerSpec::dense(256));
    config.layers.push_back(LayerSpec::relu());
    config.layers.push_back(LayerSpec::dropout(0.5));
    config.layers.push_back(LayerSpec::dense(n_classes));
    return finish(std::move(config));
}

ModelConfig build_alexnet_mini(const std::vector<int>& input_shape, int n_classes) {
    check_input(input_shape, n_classes, "AlexNetMini");
    ModelConfig config;
    config.name = "AlexNetMini";
    config.input_shape = input_shape;
    config.n_classes = n_classes;

    config.layers.push_back(LayerSpec::conv2d(48, 11, 2));
    config.layers.push_back(LayerSpec::relu());
    config.layers.push_back(LayerSpec::maxpool2());

    config.layers.push_back(LayerSpec::conv2d(96, 5));
    config.layers.push_back(LayerSpec::relu());
    config.layers.push_back(LayerSpec::maxpool2());

    config.layers.push_back(LayerSpec::conv2d(128, 3));
    config.layers.push_back(LayerSpec::relu());
    config.layers.push_back(LayerSpec::conv2d(128, 3));
    config.layers.push_back(LayerSpec::relu());
    config.layers.push_back(LayerSpec::conv2d(96, 3));
    config.layers.push_back(LayerSpec::relu());
    config.layers.push_back(LayerSpec::maxpool2());

    config.layers.push_back(LayerSpec::flatten());
    config.layers.push_back(LayerSpec::dense(512));
    config.layers.push_back(LayerSpec::relu());
    config.layers.push_back(LayerSpec::dropout(0.5));
    config.layers.push_back(LayerSpec::dense(256));
    config.layers.push_back(LayerSpec::relu());
    config.layers.push_back(LayerSpec::dropout(0.5));
    config.layers.push_back(LayerSpec::dense(n_classes));
    return finish(std::move(config));
}

namespace {

LayerSpec residual_block(int out_channels, int stride) {
    std::vector<LayerSpec> branch = {
        LayerSpec::batchnorm(), LayerSpec::relu(), LayerSpec::conv2d(out_channels, 3, stride),
        LayerSpec::batchnorm(), LayerSpec::relu(), LayerSpec::conv2d(out_channels, 3),
    };
    return LayerSpec::residual(std::move(branch), out_channels, stride);
}

} // namespace

ModelConfig build_resnet_mini(const std::vector<int>& input_shape, int n_classes) {
    check_input(input_shape, n_classes, "ResNetMini");
    ModelConfig config;
    config.name = "ResNetMini";
    config.input_shape = input_shape;
    config.n_classes = n_classes;

    config.layers.push_back(LayerSpec::conv2d(16, 3));
    const int widths[4] = {16, 32, 64, 128};
    for (int stage = 0; stage < 4; ++stage) {
        const int stride = (stage == 0) ? 1 : 2;
        config.layers.push_back(residual_block(widths[stage], stride));
        config.layers.push_back(residual_block(widths[stage], 1));
    }
    config.layers.push_back(LayerSpec::batchnorm());
    config.layers.push_back(LayerSpec::relu());
    config.layers.push_back(LayerSpec::global_avg_pool());
    config.layers.push_back(LayerSpec::dense(n_classes));
    return finish(std::move(config));
}

const std::vector<std::string>& model_keys() {
    static const std::vector<std::string> keys = {"vgge", "alexnet_mini", "resnet_mini"};
    return keys;
}

namespace {

[[noreturn]] void unknown_key(const std::string& key) {
    std::string known;
    for (const auto& k : model_keys()) {
        if (!known.empty()) known += ", ";
        known += k;
    }
    throw ConfigError("unknown model '" + key + "'; valid: " + known);
}

} // namespace

std::string display_name(const std::string& key) {
    if (key == "vgge") return "VGGE";
    if (key == "alexnet_mini") return "AlexNetMini";
    if (key == "resnet_mini") return "ResNetMini";
    unknown_key(key);
}

nn::ModelConfig build_model(const std::string& key, const std::vector<int>& input_shape,
                            int n_classes) {
    if (key == "vgge") return build_vgge(input_shape, n_classes);
    if (key == "alexnet_mini") return build_alexnet_mini(input_shape, n_classes);
    if (key == "resnet_mini") return build_resnet_mini(input_shape, n_classes);
    unknown_key(key);
}

} // namespace ser::models
