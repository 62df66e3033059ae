#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "octcvd/layers.hpp"
#include "octcvd/tensor.hpp"

namespace octcvd {

struct VaeConfig {
    // input_shape: B-scan count as channels, then B-scan height/width.
    std::int64_t channels = 16;
    std::int64_t height = 64;
    std::int64_t width = 64;
    // Out-channel counts per stride-2 stage. The last decoder entry must equal
    // `channels` so the reconstruction matches the input stack.
    std::vector<std::int64_t> encoder_channels = {32, 64, 64, 64, 64, 64};
    std::vector<std::int64_t> decoder_channels = {64, 64, 32, 32, 16, 16};
    std::int64_t latent_dim = 128;
    double beta = 1.0;
    AdamConfig adam;
    std::int64_t epochs = 12;
    std::int64_t batch_size = 16;
    std::uint64_t seed = 1;
    double leaky_slope = 0.01;
    double bn_momentum = 0.1;
    double bn_epsilon = 1e-5;

    void validate() const;
    std::string to_json() const;
    static VaeConfig from_json(const std::string& text);
};

struct LatentVector {
    std::string subject_id;
    std::string eye;  // "left" or "right"
    std::vector<std::string> names;
    std::vector<double> values;
};

struct EpochLoss {
    double total = 0.0;
    double mse = 0.0;
    double kl = 0.0;
};

std::string latent_name(const std::string& eye, std::int64_t index, std::int64_t latent_dim);

// total = mse + beta * kl, decomposed exactly.
EpochLoss elbo_loss(const Tensor& x, const Tensor& xhat, const Tensor& mu, const Tensor& logvar,
                    double beta);

// z = mu + exp(logvar / 2) * eps
std::vector<double> reparameterize(const std::vector<double>& mu, const std::vector<double>& logvar,
                                   const std::vector<double>& eps);

// Per-eye VAE: six stride-2 conv stages with batchnorm + ReLU down to a 1x1
// (or small) bottleneck, fully connected mu/logvar heads, and a mirrored
// transposed-convolution decoder with batchnorm + LeakyReLU.
class Vae {
public:
    explicit Vae(VaeConfig cfg);

    // Posterior parameters for one volume [C,H,W]; eval mode, deterministic.
    std::pair<std::vector<double>, std::vector<double>> encode(const Tensor& volume);
    // Reconstruction from a latent vector; eval mode, deterministic.
    Tensor decode(const std::vector<double>& z);

    // Batched passes used by training (training=true couples batch items
    // through batchnorm statistics).
    void encode_batch(const Tensor& x, bool training, Tensor& mu, Tensor& logvar);
    Tensor decode_batch(const Tensor& z, bool training);

    const VaeConfig& config() const { return cfg_; }
    const std::vector<EpochLoss>& loss_history() const { return loss_history_; }
    const std::vector<double>& latent_mean() const { return latent_mean_; }
    const std::vector<double>& latent_std() const { return latent_std_; }

    std::vector<Parameter*> parameters();
    // All serializable state in declaration order (parameters + batchnorm
    // running statistics).
    std::vector<std::pair<std::string, Tensor*>> state_tensors();

    void save(const std::filesystem::path& path) const;
    static Vae load(const std::filesystem::path& path);

    friend Vae train_vae(const VaeConfig& cfg, const std::vector<Tensor>& volumes);

private:
    void check_volume(const Tensor& volume) const;

    VaeConfig cfg_;
    std::vector<std::int64_t> spatial_trace_;  // encoder H per stage, [H0..H6]
    std::vector<std::int64_t> spatial_trace_w_;
    Sequential encoder_;
    std::unique_ptr<Linear> head_mu_;
    std::unique_ptr<Linear> head_logvar_;
    std::unique_ptr<Linear> dec_fc_;
    Sequential decoder_;
    std::vector<EpochLoss> loss_history_;
    std::vector<double> latent_mean_;
    std::vector<double> latent_std_;
};

// Trains a fresh VAE on the given volumes (each [C,H,W]). Deterministic under
// cfg.seed. Throws on divergence, naming the epoch.
Vae train_vae(const VaeConfig& cfg, const std::vector<Tensor>& volumes);

// Posterior means as named per-eye features ("zl###"/"zr###").
std::vector<LatentVector> extract_latents(Vae& model, const std::vector<Tensor>& volumes,
                                          const std::vector<std::string>& subject_ids,
                                          const std::string& eye);

}  // namespace octcvd
