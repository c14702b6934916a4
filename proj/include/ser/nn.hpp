#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "ser/error.hpp"

namespace ser::nn {

// Row-major dense tensor. float is the training precision; double exists for
// gradient verification. Every public operation leaves all entries finite.
template <class T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> values;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        values.assign(numel_of(shape), T(0));
    }
    Tensor(std::vector<int> s, std::vector<T> v) : shape(std::move(s)), values(std::move(v)) {
        if (values.size() != numel_of(shape)) {
            throw ShapeError("tensor value count does not match its shape");
        }
    }

    static std::size_t numel_of(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int d : s) {
            if (d <= 0) throw ShapeError("tensor dimensions must be positive");
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    std::size_t numel() const { return values.size(); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

    bool operator==(const Tensor&) const = default;
};

enum class LayerKind {
    Conv2D,
    MaxPool2D,
    Dense,
    ReLU,
    Dropout,
    Flatten,
    BatchNorm,
    GlobalAvgPool,
    Residual,
};

std::string to_string(LayerKind k);

// Static description of one layer; only the fields for its kind are
// meaningful. Residual wraps a main branch of layers plus an implicit
// shortcut: identity when shapes are preserved, otherwise a 1x1 projection
// convolution with the declared stride and out_channels.
struct LayerSpec {
    LayerKind kind = LayerKind::ReLU;
    int out_channels = 0;             // Conv2D, Residual projection
    int kernel_h = 0, kernel_w = 0;   // Conv2D
    int stride_h = 1, stride_w = 1;   // Conv2D, Residual
    bool same_pad = true;             // Conv2D
    int pool_h = 2, pool_w = 2;       // MaxPool2D (stride = pool size)
    int units = 0;                    // Dense
    double rate = 0.5;                // Dropout
    double epsilon = 1e-5;            // BatchNorm
    double momentum = 0.9;            // BatchNorm running-stat decay
    std::vector<LayerSpec> branch;    // Residual main path

    static LayerSpec conv2d(int out_channels, int kernel, int stride = 1,
                            bool same_pad = true);
    static LayerSpec maxpool2(int pool = 2);
    static LayerSpec dense(int units);
    static LayerSpec relu();
    static LayerSpec dropout(double rate);
    static LayerSpec flatten();
    static LayerSpec batchnorm();
    static LayerSpec global_avg_pool();
    static LayerSpec residual(std::vector<LayerSpec> branch, int out_channels, int stride);

    bool operator==(const LayerSpec&) const = default;
};

// Architecture description: the checkpoint header serializes exactly this.
struct ModelConfig {
    std::string name;
    std::vector<int> input_shape; // (height, width, channels) per sample
    int n_classes = 2;
    std::vector<LayerSpec> layers;

    bool operator==(const ModelConfig&) const = default;
};

std::string to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

// Shape of one layer's output for the given input, validating parameters.
// Throws ShapeError naming the layer kind on any inconsistency.
std::vector<int> layer_output_shape(const LayerSpec& spec, const std::vector<int>& input);

// Walks the whole chain; returns the final (per-sample) output shape.
std::vector<int> chain_output_shape(const std::vector<int>& input_shape,
                                    const std::vector<LayerSpec>& layers);

// Trainable parameter scalar count, from shape inference alone.
std::size_t parameter_count(const ModelConfig& config);

// One layer with its tensors. `params` are trainable, `state` holds
// BatchNorm running statistics (saved in checkpoints, never touched by the
// optimizer). Residual layers nest their branch and shortcut layers.
template <class T>
struct LayerState {
    LayerSpec spec;
    std::vector<Tensor<T>> params;
    std::vector<Tensor<T>> state;
    std::vector<LayerState<T>> branch;
    std::vector<LayerState<T>> shortcut;
};

template <class T>
struct Model {
    ModelConfig config;
    std::vector<LayerState<T>> layers;
    std::uint64_t init_seed = 0;
    // Incremented by adam_step; caches from an older version are stale.
    std::uint64_t param_version = 0;

    // Trainable tensors in declaration order (depth-first through residual
    // branches, branch before shortcut).
    std::vector<Tensor<T>*> parameters();
    std::vector<const Tensor<T>*> parameters() const;
    // Parameters plus BatchNorm running stats, in checkpoint buffer order.
    std::vector<Tensor<T>*> buffers();
    std::vector<const Tensor<T>*> buffers() const;
};

// Validates the chain end to end, allocates parameters, and applies
// He-uniform initialization (zero biases, unit BatchNorm scale), seeding
// each parameterized layer from `seed` and its ordinal.
template <class T>
Model<T> make_model(const ModelConfig& config, std::uint64_t seed);

enum class Mode { Train, Eval };

template <class T>
struct LayerCache {
    Tensor<T> input;
    Tensor<T> normalized;          // BatchNorm x-hat
    Tensor<T> mean, var;           // BatchNorm batch statistics
    std::vector<std::int32_t> argmax; // MaxPool routing (first maximum wins)
    std::vector<std::uint8_t> mask;   // Dropout keep mask
    std::vector<LayerCache<T>> branch;
    std::vector<LayerCache<T>> shortcut;
};

template <class T>
struct Cache {
    bool valid = false;
    Mode mode = Mode::Eval;
    std::uint64_t param_version = 0;
    std::vector<LayerCache<T>> layers;
};

// Deterministic forward pass over a batch shaped (N, input_shape...).
// Dropout draws its masks from `rng_seed` (train mode only, inverted
// scaling); in train mode BatchNorm uses batch statistics and updates the
// running ones in place.
template <class T>
std::pair<Tensor<T>, Cache<T>> forward(Model<T>& model, const Tensor<T>& batch, Mode mode,
                                       std::uint64_t rng_seed);

// Mean softmax cross-entropy over the batch (log-sum-exp form) and its
// gradient (softmax - one_hot) / batch_size.
template <class T>
std::pair<double, Tensor<T>> loss_softmax_ce(const Tensor<T>& logits,
                                             const std::vector<int>& labels);

// Reverse-mode gradients for every trainable parameter, aligned with
// Model::parameters(). The cache must come from a forward call against the
// current parameter version; backward does not consume it.
template <class T>
std::vector<Tensor<T>> backward(Model<T>& model, const Cache<T>& cache,
                                const Tensor<T>& dlogits);

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

template <class T>
struct AdamState {
    AdamConfig config;
    std::uint64_t step = 0;
    std::vector<Tensor<T>> m, v; // aligned with Model::parameters()
};

template <class T>
AdamState<T> make_adam_state(const Model<T>& model, AdamConfig config = {});

// Standard Adam with bias correction; increments the step counter and the
// model's parameter version.
template <class T>
void adam_step(Model<T>& model, const std::vector<Tensor<T>>& gradients,
               AdamState<T>& state);

struct GradCheckOptions {
    double epsilon = 1e-4;
    int samples_per_layer = 50; // random parameter subsample, per layer
    std::uint64_t rng_seed = 0; // fixes dropout masks and the subsample
    // Ordinal of a parameterized layer whose analytic gradients are
    // deliberately corrupted (harness sensitivity check); -1 = none.
    int corrupt_layer = -1;
};

// Max relative error between analytic gradients and central finite
// differences, |g - fd| / max(|g|, |fd|, 1e-6), over the sampled parameters.
// Runs in train mode so BatchNorm batch statistics are exercised; dropout
// masks depend only on the seed, so they are stable across perturbations.
// Samples whose difference window straddles a ReLU/max-pool kink are retried
// with progressively halved steps (down to the 64-bit roundoff floor) so the
// oracle reflects gradient correctness rather than kink placement.
double grad_check(Model<double>& model, const Tensor<double>& batch,
                  const std::vector<int>& labels, GradCheckOptions options = {});

// Checkpoint layout: one JSON header line (format version, model config,
// init seed, buffer value count), '\n', then every Model::buffers() tensor as
// raw little-endian float32 in order. Loading restores exact float values.
inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

template <class T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model);

template <class T>
Model<T> load_checkpoint(const std::filesystem::path& path);

} // namespace ser::nn
