#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "randlab/rng.hpp"
#include "randlab/tensor.hpp"

namespace randlab {

// Layer descriptors. A network is an ordered list of these; shapes must
// compose and the last layer must be OutputLogits.
struct Conv2D {
    int filters = 1;
    int kernel = 3;
    int stride = 1;
};
struct MaxPool {
    int kernel = 2;
};
struct ReLU {};
struct Flatten {};
struct Dense {
    int out_dim = 1;
};
struct OutputLogits {
    int num_classes = 2;
};

using LayerDesc = std::variant<Conv2D, MaxPool, ReLU, Flatten, Dense, OutputLogits>;

std::string layer_name(const LayerDesc& layer);

struct Architecture {
    std::vector<int> input_shape;  // per-sample, e.g. {1,28,28} or {2}
    std::vector<LayerDesc> layers;

    int num_classes() const;
    // Output shape of every layer, starting from input_shape. Throws with a
    // diagnostic if consecutive layers do not compose or the tail is wrong.
    std::vector<std::vector<int>> layer_shapes() const;
    void validate() const { (void)layer_shapes(); }

    bool operator==(const Architecture&) const = default;

    // Scaled-down single-conv-block MNIST network used throughout the
    // desk-scale experiments.
    static Architecture mnist_desk();
    // Plain MLP over flat inputs (hidden layers ReLU-activated).
    static Architecture mlp(std::vector<int> input_shape, std::vector<int> hidden, int num_classes);
};

struct LayerParams {
    Tensor w;  // empty for parameterless layers
    Tensor b;
    bool has_params() const { return !w.empty(); }
};

struct Model {
    Architecture arch;
    std::vector<LayerParams> params;  // one entry per layer
    uint64_t train_seed = 0;

    int64_t num_params() const;
    void check_finite() const;
};

// Glorot-uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases.
Model init_model(const Architecture& arch, uint64_t seed);

// Activations recorded during forward for use by backward.
struct ForwardTrace {
    std::vector<Tensor> acts;                    // acts[0] = input, acts[L] = logits
    std::vector<std::vector<int32_t>> pool_idx;  // per layer: argmax map for MaxPool
};

// Batched forward pass: batch is {N, ...input_shape}, result {N, C} logits.
// Shape mismatches are rejected with a diagnostic error.
Tensor forward(const Model& model, const Tensor& batch, ForwardTrace* trace = nullptr);

// Argmax class for one sample (shape input_shape, or {1,...} batch of one).
// Ties break toward the lowest class index.
int predict(const Model& model, const Tensor& x);
std::vector<int> predict_batch(const Model& model, const Tensor& batch);
int argmax_lowest(const float* v, int n);

// Loss specifications for input-gradient queries.
struct CrossEntropyLoss {
    int label = 0;
};
struct CwMarginLoss {
    int target = 0;      // attack target (targeted) or true label (untargeted)
    double k = 0.0;      // confidence margin
    bool targeted = true;
};
using LossSpec = std::variant<CrossEntropyLoss, CwMarginLoss>;

// Mean softmax cross-entropy over the batch, accumulated in f64.
double mean_cross_entropy(const Tensor& logits, const std::vector<int>& labels);
// d(mean CE)/d(logits), i.e. (softmax - onehot)/N.
Tensor cross_entropy_dlogits(const Tensor& logits, const std::vector<int>& labels);

struct Gradients {
    std::vector<LayerParams> layers;
};

// Reverse pass from d(loss)/d(logits). Either output may be null.
void backward(const Model& model, const ForwardTrace& trace, const Tensor& dlogits,
              Gradients* param_grads, Tensor* input_grad);

// Gradient of mean cross-entropy w.r.t. all parameters.
Gradients grad_params(const Model& model, const Tensor& batch, const std::vector<int>& labels);

// Gradient of the given scalar loss w.r.t. a single input sample.
Tensor grad_input(const Model& model, const Tensor& x, const LossSpec& loss);
// The matching scalar (used by finite-difference checks and line searches).
double loss_value(const Model& model, const Tensor& x, const LossSpec& loss);

}  // namespace randlab
