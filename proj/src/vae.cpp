#include "octcvd/vae.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "octcvd/ioutil.hpp"
#include "octcvd/rng.hpp"

namespace octcvd {

using nlohmann::json;

void VaeConfig::validate() const {
    if (channels <= 0 || height <= 0 || width <= 0)
        throw std::invalid_argument("vae config: input shape must be positive");
    if (encoder_channels.empty() || decoder_channels.empty())
        throw std::invalid_argument("vae config: channel lists must be non-empty");
    if (encoder_channels.size() != decoder_channels.size())
        throw std::invalid_argument("vae config: encoder and decoder stage counts must match");
    if (decoder_channels.back() != channels)
        throw std::invalid_argument("vae config: last decoder channel count must equal the B-scan count");
    if (latent_dim < 1) throw std::invalid_argument("vae config: latent_dim must be >= 1");
    if (beta < 0) throw std::invalid_argument("vae config: beta must be nonnegative");
    if (epochs < 1 || batch_size < 2)
        throw std::invalid_argument("vae config: epochs >= 1 and batch_size >= 2 required");
}

std::string VaeConfig::to_json() const {
    json j;
    j["channels"] = channels;
    j["height"] = height;
    j["width"] = width;
    j["encoder_channels"] = encoder_channels;
    j["decoder_channels"] = decoder_channels;
    j["latent_dim"] = latent_dim;
    j["beta"] = beta;
    j["lr"] = adam.lr;
    j["adam_beta1"] = adam.beta1;
    j["adam_beta2"] = adam.beta2;
    j["adam_eps"] = adam.eps;
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["seed"] = seed;
    j["leaky_slope"] = leaky_slope;
    j["bn_momentum"] = bn_momentum;
    j["bn_epsilon"] = bn_epsilon;
    return j.dump();
}

VaeConfig VaeConfig::from_json(const std::string& text) {
    json j = json::parse(text);
    VaeConfig c;
    c.channels = j.at("channels").get<std::int64_t>();
    c.height = j.at("height").get<std::int64_t>();
    c.width = j.at("width").get<std::int64_t>();
    c.encoder_channels = j.at("encoder_channels").get<std::vector<std::int64_t>>();
    c.decoder_channels = j.at("decoder_channels").get<std::vector<std::int64_t>>();
    c.latent_dim = j.at("latent_dim").get<std::int64_t>();
    c.beta = j.at("beta").get<double>();
    c.adam.lr = j.at("lr").get<double>();
    c.adam.beta1 = j.at("adam_beta1").get<double>();
    c.adam.beta2 = j.at("adam_beta2").get<double>();
    c.adam.eps = j.at("adam_eps").get<double>();
    c.epochs = j.at("epochs").get<std::int64_t>();
    c.batch_size = j.at("batch_size").get<std::int64_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.leaky_slope = j.at("leaky_slope").get<double>();
    c.bn_momentum = j.at("bn_momentum").get<double>();
    c.bn_epsilon = j.at("bn_epsilon").get<double>();
    return c;
}

std::string latent_name(const std::string& eye, std::int64_t index, std::int64_t latent_dim) {
    if (eye != "left" && eye != "right") throw std::invalid_argument("eye must be 'left' or 'right'");
    const char* prefix = eye == "left" ? "zl" : "zr";
    int width = 3;
    for (std::int64_t v = latent_dim - 1; v >= 1000; v /= 10) ++width;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s%0*lld", prefix, width, static_cast<long long>(index));
    return std::string(buf);
}

EpochLoss elbo_loss(const Tensor& x, const Tensor& xhat, const Tensor& mu, const Tensor& logvar,
                    double beta) {
    EpochLoss out;
    out.mse = mse_loss(x, xhat);
    out.kl = kl_loss(mu, logvar);
    out.total = out.mse + beta * out.kl;
    return out;
}

std::vector<double> reparameterize(const std::vector<double>& mu, const std::vector<double>& logvar,
                                   const std::vector<double>& eps) {
    if (mu.size() != logvar.size() || mu.size() != eps.size())
        throw std::invalid_argument("reparameterize: length mismatch");
    std::vector<double> z(mu.size());
    for (std::size_t i = 0; i < mu.size(); ++i) z[i] = mu[i] + std::exp(0.5 * logvar[i]) * eps[i];
    return z;
}

namespace {

std::int64_t conv_down(std::int64_t h) { return (h + 2 - 3) / 2 + 1; }  // k=3, s=2, p=1

}  // namespace

Vae::Vae(VaeConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng init = Rng::derive(cfg_.seed, {0x5641455F494E4954ULL});  // independent init stream

    const std::size_t stages = cfg_.encoder_channels.size();
    spatial_trace_.push_back(cfg_.height);
    spatial_trace_w_.push_back(cfg_.width);
    std::int64_t in_ch = cfg_.channels;
    for (std::size_t i = 0; i < stages; ++i) {
        const std::int64_t out_ch = cfg_.encoder_channels[i];
        std::string name = "enc" + std::to_string(i);
        encoder_.add(std::make_unique<Conv2d>(LayerSpec::conv2d(in_ch, out_ch, 3, 2, 1), init, name + ".conv"));
        encoder_.add(std::make_unique<BatchNorm2d>(
            LayerSpec::batchnorm2d(out_ch, cfg_.bn_momentum, cfg_.bn_epsilon), name + ".bn"));
        encoder_.add(std::make_unique<Activation>(LayerSpec::relu()));
        spatial_trace_.push_back(conv_down(spatial_trace_.back()));
        spatial_trace_w_.push_back(conv_down(spatial_trace_w_.back()));
        in_ch = out_ch;
    }
    const std::int64_t hb = spatial_trace_.back(), wb = spatial_trace_w_.back();
    const std::int64_t flat = in_ch * hb * wb;
    head_mu_ = std::make_unique<Linear>(LayerSpec::linear(flat, cfg_.latent_dim), init, "head_mu");
    head_logvar_ = std::make_unique<Linear>(LayerSpec::linear(flat, cfg_.latent_dim), init, "head_logvar");
    dec_fc_ = std::make_unique<Linear>(LayerSpec::linear(cfg_.latent_dim, flat), init, "dec_fc");

    // Decoder stages invert the encoder's spatial trace; output_padding is
    // chosen per stage so each transposed convolution lands exactly on the
    // matching encoder extent.
    std::int64_t dec_in = in_ch;
    for (std::size_t i = 0; i < stages; ++i) {
        const std::int64_t out_ch = cfg_.decoder_channels[i];
        const std::int64_t cur = spatial_trace_[stages - i];
        const std::int64_t target = spatial_trace_[stages - i - 1];
        const std::int64_t op = target - ((cur - 1) * 2 - 2 + 3);
        if (op < 0 || op >= 2)
            throw std::invalid_argument("vae: encoder spatial trace not invertible by stride-2 decoder");
        std::string name = "dec" + std::to_string(i);
        decoder_.add(std::make_unique<ConvTranspose2d>(LayerSpec::conv_transpose2d(dec_in, out_ch, 3, 2, 1, op),
                                                       init, name + ".deconv"));
        decoder_.add(std::make_unique<BatchNorm2d>(
            LayerSpec::batchnorm2d(out_ch, cfg_.bn_momentum, cfg_.bn_epsilon), name + ".bn"));
        decoder_.add(std::make_unique<Activation>(LayerSpec::leaky_relu(cfg_.leaky_slope)));
        dec_in = out_ch;
    }
    latent_mean_.assign(static_cast<std::size_t>(cfg_.latent_dim), 0.0);
    latent_std_.assign(static_cast<std::size_t>(cfg_.latent_dim), 0.0);
}

void Vae::check_volume(const Tensor& volume) const {
    if (volume.ndim() != 3 || volume.dim(0) != cfg_.channels || volume.dim(1) != cfg_.height ||
        volume.dim(2) != cfg_.width) {
        std::ostringstream os;
        os << "vae: volume shape " << volume.shape_str() << " does not match configured input [" << cfg_.channels
           << "," << cfg_.height << "," << cfg_.width << "]";
        throw std::invalid_argument(os.str());
    }
}

void Vae::encode_batch(const Tensor& x, bool training, Tensor& mu, Tensor& logvar) {
    Tensor feat = encoder_.forward(x, training);
    mu = head_mu_->forward(feat, training);
    logvar = head_logvar_->forward(feat, training);
}

Tensor Vae::decode_batch(const Tensor& z, bool training) {
    Tensor h = dec_fc_->forward(z, training);
    const std::size_t stages = cfg_.encoder_channels.size();
    h.shape = {z.dim(0), cfg_.encoder_channels.back(), spatial_trace_[stages], spatial_trace_w_[stages]};
    return decoder_.forward(h, training);
}

std::pair<std::vector<double>, std::vector<double>> Vae::encode(const Tensor& volume) {
    check_volume(volume);
    Tensor x({1, cfg_.channels, cfg_.height, cfg_.width}, volume.data);
    Tensor mu, logvar;
    encode_batch(x, false, mu, logvar);
    mu.require_finite("vae.encode.mu");
    logvar.require_finite("vae.encode.logvar");
    return {mu.data, logvar.data};
}

Tensor Vae::decode(const std::vector<double>& z) {
    if (static_cast<std::int64_t>(z.size()) != cfg_.latent_dim) {
        std::ostringstream os;
        os << "vae: latent length " << z.size() << " does not match latent_dim " << cfg_.latent_dim;
        throw std::invalid_argument(os.str());
    }
    Tensor zt({1, cfg_.latent_dim}, z);
    Tensor xhat = decode_batch(zt, false);
    xhat.require_finite("vae.decode");
    return Tensor({cfg_.channels, cfg_.height, cfg_.width}, xhat.data);
}

std::vector<Parameter*> Vae::parameters() {
    std::vector<Parameter*> ps = encoder_.parameters();
    for (Parameter* p : head_mu_->parameters()) ps.push_back(p);
    for (Parameter* p : head_logvar_->parameters()) ps.push_back(p);
    for (Parameter* p : dec_fc_->parameters()) ps.push_back(p);
    for (Parameter* p : decoder_.parameters()) ps.push_back(p);
    return ps;
}

std::vector<std::pair<std::string, Tensor*>> Vae::state_tensors() {
    std::vector<std::pair<std::string, Tensor*>> out;
    auto add_seq = [&out](Sequential& seq) {
        for (Layer* l : seq.layers()) {
            for (Parameter* p : l->parameters()) out.emplace_back(p->name, &p->value);
            for (auto& [name, t] : l->buffers()) out.emplace_back(name, t);
        }
    };
    add_seq(encoder_);
    for (Parameter* p : head_mu_->parameters()) out.emplace_back(p->name, &p->value);
    for (Parameter* p : head_logvar_->parameters()) out.emplace_back(p->name, &p->value);
    for (Parameter* p : dec_fc_->parameters()) out.emplace_back(p->name, &p->value);
    add_seq(decoder_);
    return out;
}

Vae train_vae(const VaeConfig& cfg, const std::vector<Tensor>& volumes) {
    cfg.validate();
    if (volumes.size() < 2) throw std::invalid_argument("train_vae: need at least 2 training volumes");
    Vae model(cfg);
    for (const Tensor& v : volumes) model.check_volume(v);

    AdamOptimizer opt(cfg.adam);
    std::vector<Parameter*> params = model.parameters();
    const std::int64_t n = static_cast<std::int64_t>(volumes.size());
    const std::int64_t C = cfg.channels, H = cfg.height, W = cfg.width, D = cfg.latent_dim;

    for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng erng = Rng::derive(cfg.seed, {0x45504F4348ULL, static_cast<std::uint64_t>(epoch)});
        std::vector<std::int64_t> order(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
        erng.shuffle(order);

        // Batch boundaries; a trailing singleton is folded into the previous
        // batch so batchnorm always sees at least two items.
        std::vector<std::pair<std::int64_t, std::int64_t>> batches;
        for (std::int64_t s = 0; s < n; s += cfg.batch_size)
            batches.emplace_back(s, std::min(n, s + cfg.batch_size));
        if (batches.size() > 1 && batches.back().second - batches.back().first < 2) {
            batches[batches.size() - 2].second = n;
            batches.pop_back();
        }

        EpochLoss acc;
        std::int64_t n_batches = 0;
        for (auto [b0, b1] : batches) {
            const std::int64_t B = b1 - b0;
            Tensor x({B, C, H, W});
            for (std::int64_t b = 0; b < B; ++b) {
                const Tensor& v = volumes[static_cast<std::size_t>(order[static_cast<std::size_t>(b0 + b)])];
                std::copy(v.data.begin(), v.data.end(), x.data.begin() + b * C * H * W);
            }
            AdamOptimizer::zero_grad(params);
            Tensor mu, logvar;
            model.encode_batch(x, true, mu, logvar);

            Tensor eps({B, D});
            for (double& e : eps.data) e = erng.normal();
            Tensor z({B, D});
            for (std::size_t i = 0; i < z.data.size(); ++i)
                z.data[i] = mu.data[i] + std::exp(0.5 * logvar.data[i]) * eps.data[i];

            Tensor xhat = model.decode_batch(z, true);
            Tensor g_xhat;
            const double mse = mse_loss(x, xhat, &g_xhat);
            Tensor g_kl_mu, g_kl_lv;
            const double kl = kl_loss(mu, logvar, &g_kl_mu, &g_kl_lv);
            const double total = mse + cfg.beta * kl;
            if (!std::isfinite(total)) {
                std::ostringstream os;
                os << "train_vae: loss diverged (non-finite) at epoch " << epoch;
                throw std::runtime_error(os.str());
            }

            Tensor g_h = model.decoder_.backward(g_xhat);
            g_h.shape = {B, static_cast<std::int64_t>(g_h.data.size()) / B};
            Tensor g_z = model.dec_fc_->backward(g_h);

            Tensor g_mu({B, D}), g_logvar({B, D});
            for (std::size_t i = 0; i < g_mu.data.size(); ++i) {
                const double dz = g_z.data[i];
                g_mu.data[i] = dz + cfg.beta * g_kl_mu.data[i];
                g_logvar.data[i] = dz * eps.data[i] * 0.5 * std::exp(0.5 * logvar.data[i]) +
                                   cfg.beta * g_kl_lv.data[i];
            }
            Tensor g_feat_mu = model.head_mu_->backward(g_mu);
            Tensor g_feat_lv = model.head_logvar_->backward(g_logvar);
            Tensor g_feat(g_feat_mu.shape);
            for (std::size_t i = 0; i < g_feat.data.size(); ++i)
                g_feat.data[i] = g_feat_mu.data[i] + g_feat_lv.data[i];
            model.encoder_.backward(g_feat);

            opt.step(params);
            acc.total += total;
            acc.mse += mse;
            acc.kl += kl;
            ++n_batches;
        }
        acc.total /= static_cast<double>(n_batches);
        acc.mse /= static_cast<double>(n_batches);
        acc.kl /= static_cast<double>(n_batches);
        model.loss_history_.push_back(acc);
    }

    // Latent population statistics from the final encoder, eval mode.
    std::vector<double> sum(static_cast<std::size_t>(D), 0.0), sumsq(static_cast<std::size_t>(D), 0.0);
    for (const Tensor& v : volumes) {
        auto [mu, logvar] = model.encode(v);
        (void)logvar;
        for (std::size_t d = 0; d < mu.size(); ++d) {
            sum[d] += mu[d];
            sumsq[d] += mu[d] * mu[d];
        }
    }
    const double nn = static_cast<double>(n);
    for (std::size_t d = 0; d < sum.size(); ++d) {
        const double mean = sum[d] / nn;
        const double var = std::max(0.0, sumsq[d] / nn - mean * mean);
        model.latent_mean_[d] = mean;
        model.latent_std_[d] = std::sqrt(var);
    }
    return model;
}

std::vector<LatentVector> extract_latents(Vae& model, const std::vector<Tensor>& volumes,
                                          const std::vector<std::string>& subject_ids,
                                          const std::string& eye) {
    if (volumes.size() != subject_ids.size())
        throw std::invalid_argument("extract_latents: volumes and subject_ids length mismatch");
    const std::int64_t D = model.config().latent_dim;
    std::vector<std::string> names;
    names.reserve(static_cast<std::size_t>(D));
    for (std::int64_t d = 0; d < D; ++d) names.push_back(latent_name(eye, d, D));
    std::vector<LatentVector> out;
    out.reserve(volumes.size());
    for (std::size_t i = 0; i < volumes.size(); ++i) {
        auto [mu, logvar] = model.encode(volumes[i]);
        (void)logvar;
        LatentVector lv;
        lv.subject_id = subject_ids[i];
        lv.eye = eye;
        lv.names = names;
        lv.values = std::move(mu);
        out.push_back(std::move(lv));
    }
    return out;
}

void Vae::save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("vae.save: cannot open " + path.string());
    os.write("VAE1", 4);
    const std::string cfg_json = cfg_.to_json();
    write_u32_le(os, static_cast<std::uint32_t>(cfg_json.size()));
    os.write(cfg_json.data(), static_cast<std::streamsize>(cfg_json.size()));

    auto tensors = const_cast<Vae*>(this)->state_tensors();
    write_u32_le(os, static_cast<std::uint32_t>(tensors.size()));
    for (auto& [name, t] : tensors) {
        write_u32_le(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u32_le(os, static_cast<std::uint32_t>(t->shape.size()));
        for (std::int64_t d : t->shape) write_u32_le(os, static_cast<std::uint32_t>(d));
        write_f64_block_le(os, t->data);
    }
    write_u32_le(os, static_cast<std::uint32_t>(latent_mean_.size()));
    write_f64_block_le(os, latent_mean_);
    write_f64_block_le(os, latent_std_);
    write_u32_le(os, static_cast<std::uint32_t>(loss_history_.size()));
    for (const EpochLoss& e : loss_history_) {
        write_f64_le(os, e.total);
        write_f64_le(os, e.mse);
        write_f64_le(os, e.kl);
    }
    if (!os) throw std::runtime_error("vae.save: write failed for " + path.string());
}

Vae Vae::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("vae.load: cannot open " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "VAE1")
        throw std::runtime_error("vae.load: bad magic in " + path.string());
    const std::uint32_t cfg_len = read_u32_le(is);
    std::string cfg_json(cfg_len, '\0');
    is.read(cfg_json.data(), cfg_len);
    Vae model(VaeConfig::from_json(cfg_json));

    auto tensors = model.state_tensors();
    const std::uint32_t count = read_u32_le(is);
    if (count != tensors.size()) throw std::runtime_error("vae.load: tensor count mismatch");
    for (auto& [name, t] : tensors) {
        const std::uint32_t name_len = read_u32_le(is);
        std::string got(name_len, '\0');
        is.read(got.data(), name_len);
        if (got != name)
            throw std::runtime_error("vae.load: tensor order mismatch: expected " + name + " got " + got);
        const std::uint32_t ndim = read_u32_le(is);
        std::vector<std::int64_t> shape(ndim);
        for (std::uint32_t i = 0; i < ndim; ++i) shape[i] = read_u32_le(is);
        if (shape != t->shape) throw std::runtime_error("vae.load: tensor shape mismatch for " + name);
        t->data = read_f64_block_le(is, t->data.size());
    }
    const std::uint32_t d = read_u32_le(is);
    model.latent_mean_ = read_f64_block_le(is, d);
    model.latent_std_ = read_f64_block_le(is, d);
    const std::uint32_t hist = read_u32_le(is);
    model.loss_history_.resize(hist);
    for (std::uint32_t i = 0; i < hist; ++i) {
        model.loss_history_[i].total = read_f64_le(is);
        model.loss_history_[i].mse = read_f64_le(is);
        model.loss_history_[i].kl = read_f64_le(is);
    }
    if (!is) throw std::runtime_error("vae.load: truncated file " + path.string());
    return model;
}

}  // namespace octcvd
