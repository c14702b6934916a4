#pragma once

#include <vector>

#include "ser/nn.hpp"

// Concrete architecture builders for the valence classifiers: the 4-block
// VGG-style network the experiments revolve around, plus scaled-down
// AlexNet- and ResNet-style comparators. Builders are pure and validate the
// whole layer chain eagerly, so an input too small for the pooling pyramid
// fails at build time rather than at the first forward pass.
namespace ser::models {

// Four same-padded Conv3x3/ReLU/MaxPool2x2 blocks with doubling widths
// (32, 64, 128, 256), then Flatten, Dense(256), ReLU, Dropout(0.5) and the
// class head. Requires at least 16 frames (and enough rows for four 2x2
// poolings); throws ShapeError otherwise.
nn::ModelConfig build_vgge(const std::vector<int>& input_shape, int n_classes = 2);

// Five conv layers with the classic large-then-small kernel pattern
// (11x11 stride 2, 5x5, then three 3x3), pooling after the first, second and
// fifth, and two dropout-regularized dense layers before the head.
nn::ModelConfig build_alexnet_mini(const std::vector<int>& input_shape, int n_classes = 2);

// A 3x3 stem followed by four stages of two pre-activation residual blocks
// (BatchNorm-ReLU-Conv twice per branch), channels 16/32/64/128, stride-2
// downsampling with 1x1 projection shortcuts at each stage boundary, then
// BatchNorm, ReLU, global average pooling and the class head.
nn::ModelConfig build_resnet_mini(const std::vector<int>& input_shape, int n_classes = 2);

// Architecture registry for configuration files and the command line.
// Keys, in stable order: "vgge", "alexnet_mini", "resnet_mini".
const std::vector<std::string>& model_keys();

// Table/report name for a registry key ("VGGE", "AlexNetMini", "ResNetMini").
// Unknown keys throw ConfigError listing the valid ones.
std::string display_name(const std::string& key);

// Builds the keyed architecture; unknown keys throw ConfigError listing the
// valid ones.
nn::ModelConfig build_model(const std::string& key, const std::vector<int>& input_shape,
                            int n_classes = 2);

} // namespace ser::models
