#pragma once

#include <memory>
#include <string>
#include <vector>

#include "octcvd/rng.hpp"
#include "octcvd/tensor.hpp"

namespace octcvd {

enum class LayerKind { conv2d, conv_transpose2d, batchnorm2d, relu, leaky_relu, linear };

std::string layer_kind_name(LayerKind k);
LayerKind layer_kind_from_name(const std::string& name);

struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    std::int64_t in_channels = 0;
    std::int64_t out_channels = 0;
    std::int64_t kernel = 3;
    std::int64_t stride = 2;
    std::int64_t padding = 1;
    std::int64_t output_padding = 0;
    double negative_slope = 0.01;
    double momentum = 0.1;
    double epsilon = 1e-5;
    std::int64_t in_features = 0;
    std::int64_t out_features = 0;

    void validate() const;

    static LayerSpec conv2d(std::int64_t in_ch, std::int64_t out_ch, std::int64_t k = 3,
                            std::int64_t stride = 2, std::int64_t pad = 1);
    static LayerSpec conv_transpose2d(std::int64_t in_ch, std::int64_t out_ch, std::int64_t k = 3,
                                      std::int64_t stride = 2, std::int64_t pad = 1,
                                      std::int64_t output_pad = 1);
    static LayerSpec batchnorm2d(std::int64_t channels, double momentum = 0.1, double eps = 1e-5);
    static LayerSpec relu();
    static LayerSpec leaky_relu(double slope = 0.01);
    static LayerSpec linear(std::int64_t in_features, std::int64_t out_features);
};

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor adam_m;
    Tensor adam_v;

    Parameter() = default;
    Parameter(std::string n, Tensor v);
    void zero_grad() { grad.fill(0.0); }
};

// A layer owns its parameters, caches whatever the backward pass needs, and
// accumulates parameter gradients in backward(). Callers zero grads between
// steps.
class Layer {
public:
    virtual ~Layer() = default;
    virtual Tensor forward(const Tensor& x, bool training) = 0;
    virtual Tensor backward(const Tensor& grad_out) = 0;
    virtual std::vector<Parameter*> parameters() { return {}; }
    // Non-trainable state that still must be serialized (batchnorm running stats).
    virtual std::vector<std::pair<std::string, Tensor*>> buffers() { return {}; }
    const LayerSpec& spec() const { return spec_; }

protected:
    explicit Layer(LayerSpec s) : spec_(std::move(s)) { spec_.validate(); }
    LayerSpec spec_;
};

class Conv2d : public Layer {
public:
    explicit Conv2d(LayerSpec s, std::string name = "conv");
    Conv2d(LayerSpec s, Rng& init_rng, std::string name = "conv");
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;
    std::vector<Parameter*> parameters() override { return {&weight, &bias}; }

    Parameter weight;  // [out_ch, in_ch, k, k]
    Parameter bias;    // [out_ch]

private:
    Tensor cached_input_;
};

class ConvTranspose2d : public Layer {
public:
    explicit ConvTranspose2d(LayerSpec s, std::string name = "deconv");
    ConvTranspose2d(LayerSpec s, Rng& init_rng, std::string name = "deconv");
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;
    std::vector<Parameter*> parameters() override { return {&weight, &bias}; }

    Parameter weight;  // [in_ch, out_ch, k, k]
    Parameter bias;    // [out_ch]

private:
    Tensor cached_input_;
};

class BatchNorm2d : public Layer {
public:
    explicit BatchNorm2d(LayerSpec s, std::string name = "bn");
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;
    std::vector<Parameter*> parameters() override { return {&gamma, &beta}; }
    std::vector<std::pair<std::string, Tensor*>> buffers() override {
        return {{name_ + ".running_mean", &running_mean}, {name_ + ".running_var", &running_var}};
    }

    Parameter gamma;  // [ch]
    Parameter beta;   // [ch]
    Tensor running_mean;
    Tensor running_var;

private:
    std::string name_;
    bool trained_mode_ = false;
    Tensor cached_xhat_;
    std::vector<double> cached_invstd_;
};

class Activation : public Layer {
public:
    explicit Activation(LayerSpec s);
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;

private:
    Tensor cached_input_;
};

class Linear : public Layer {
public:
    explicit Linear(LayerSpec s, std::string name = "linear");
    Linear(LayerSpec s, Rng& init_rng, std::string name = "linear");
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;
    std::vector<Parameter*> parameters() override { return {&weight, &bias}; }

    Parameter weight;  // [in_features, out_features]
    Parameter bias;    // [out_features]

private:
    Tensor cached_input_;
    std::vector<std::int64_t> cached_orig_shape_;
};

std::unique_ptr<Layer> make_layer(const LayerSpec& spec, Rng& init_rng, const std::string& name);

// Mean squared error over all elements. If grad_xhat is given it receives
// d(loss)/d(xhat) = 2 (xhat - x) / numel.
double mse_loss(const Tensor& x, const Tensor& xhat, Tensor* grad_xhat = nullptr);

// KL divergence of N(mu, exp(logvar)) from N(0, I): -1/2 sum_d (1 + logvar -
// exp(logvar) - mu^2), summed over latent dims and averaged over the leading
// batch dim. Nonnegative; zero iff mu == 0 and logvar == 0.
double kl_loss(const Tensor& mu, const Tensor& logvar, Tensor* grad_mu = nullptr,
               Tensor* grad_logvar = nullptr);

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class AdamOptimizer {
public:
    explicit AdamOptimizer(AdamConfig cfg = {}) : cfg_(cfg) {}
    // One Adam update over all parameters. Throws on non-finite gradients,
    // naming the offending parameter.
    void step(const std::vector<Parameter*>& params);
    static void zero_grad(const std::vector<Parameter*>& params);
    std::int64_t steps() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

private:
    AdamConfig cfg_;
    std::int64_t t_ = 0;
};

class Sequential {
public:
    Sequential() = default;
    void add(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }
    Tensor forward(const Tensor& x, bool training);
    Tensor backward(const Tensor& grad_out);
    std::vector<Parameter*> parameters();
    std::vector<Layer*> layers();
    std::size_t size() const { return layers_.size(); }

private:
    std::vector<std::unique_ptr<Layer>> layers_;
};

enum class GradCheckLoss {
    mse_to_target,  // MSE of network output against a fixed synthetic target
    kl_split        // output [N, 2D] read as (mu | logvar) halves, KL loss
};

// Compares analytic gradients against central finite differences (step h)
// for every parameter element and every input element. Returns the max
// relative error with denominator max(|analytic|, |numeric|, 1e-8).
double grad_check(Sequential& net, const Tensor& input, GradCheckLoss loss, double h = 1e-4);

}  // namespace octcvd
