#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "latent_unlearn/rng.hpp"
#include "latent_unlearn/tensor.hpp"

namespace latent_unlearn {

/// A trainable array. Values are held in double for arithmetic but are kept
/// representable in float32, the checkpoint storage type.
struct Parameter {
    std::string name;
    std::vector<int> shape;
    std::vector<double> value;

    std::size_t size() const { return value.size(); }
};

/// Per-parameter gradient buffers, aligned with Network::parameters().
using Gradients = std::vector<std::vector<double>>;

/// Round every element to the nearest float32.
void quantize_f32(std::vector<double>& v);

class Layer {
public:
    virtual ~Layer() = default;

    virtual std::string kind() const = 0;
    virtual Shape output_shape(const Shape& in) const = 0;
    virtual Tensor forward(const Tensor& x) const = 0;
    /// Gradient w.r.t. the input given the gradient w.r.t. the output. `grads`
    /// is either empty (skip parameter gradients) or one buffer per parameter.
    virtual Tensor backward(const Tensor& x, const Tensor& y, const Tensor& dy,
                            std::span<std::vector<double>> grads) const = 0;
    virtual std::vector<Parameter*> parameters() { return {}; }
    virtual void initialize(Rng&) {}
    virtual std::unique_ptr<Layer> clone() const = 0;
};

std::unique_ptr<Layer> make_linear(int in, int out, double init_gain = 1.0);
std::unique_ptr<Layer> make_conv3x3(int in_channels, int out_channels, double init_gain = 1.0);
std::unique_ptr<Layer> make_leaky_relu(double slope = 0.2);
std::unique_ptr<Layer> make_tanh();
std::unique_ptr<Layer> make_upsample2x();
std::unique_ptr<Layer> make_avg_pool2x();
std::unique_ptr<Layer> make_reshape(int c, int h, int w);
std::unique_ptr<Layer> make_scale(double factor);
std::unique_ptr<Layer> make_l2_normalize();

/// Activations recorded by a forward pass: activations[0] is the input,
/// activations[i + 1] the output of layer i.
struct Trace {
    std::vector<Tensor> activations;
    const Tensor& output() const { return activations.back(); }
};

/// Gradient injected at an activation index during backward.
struct GradSeed {
    std::size_t activation;
    Tensor grad;
};

/// Sequential stack of layers with value semantics (copies are deep).
class Network {
public:
    explicit Network(std::string name = {}) : name_(std::move(name)) {}
    Network(const Network& other);
    Network& operator=(const Network& other);
    Network(Network&&) noexcept = default;
    Network& operator=(Network&&) noexcept = default;

    Network& add(std::unique_ptr<Layer> layer);

    const std::string& name() const { return name_; }
    std::size_t depth() const { return layers_.size(); }
    const Layer& layer(std::size_t i) const { return *layers_[i]; }

    Shape output_shape(Shape in) const;

    Tensor forward(const Tensor& x) const;
    Tensor forward(const Tensor& x, Trace& trace) const;

    /// Backpropagate `grad_out` from the final output. Returns the input gradient.
    Tensor backward(const Trace& trace, const Tensor& grad_out, Gradients* grads) const;
    /// Backpropagate gradients injected at arbitrary activations.
    Tensor backward(const Trace& trace, std::vector<GradSeed> seeds, Gradients* grads) const;

    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;
    std::size_t parameter_count() const;
    Gradients zero_gradients() const;

    /// Draw fresh weights; names are re-derived from the network name.
    void initialize(Rng& rng);

private:
    void rename_parameters();

    std::string name_;
    std::vector<std::unique_ptr<Layer>> layers_;
};

/// Plain Adam over a network's parameter list.
class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    /// One update; parameters are re-quantized to float32 afterwards.
    void step(std::span<Parameter* const> params, const Gradients& grads);

    long steps() const { return t_; }
    void set_learning_rate(double lr) { lr_ = lr; }
    double learning_rate() const { return lr_; }

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    Gradients m_, v_;
};

}  // namespace latent_unlearn
