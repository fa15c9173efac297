#include "refkv/codec.hpp"

#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "refkv/autodiff.hpp"
#include "refkv/linalg.hpp"
#include "refkv/manifest.hpp"
#include "refkv/optim.hpp"
#include "refkv/tensor_io.hpp"

namespace refkv {

namespace {

void check_codec_config(const CodecConfig& cfg) {
    if (cfg.image_size < 1 || cfg.latent_size < 1 || cfg.latent_channels < 1)
        throw std::invalid_argument("codec: sizes must be positive");
    if (cfg.image_size % cfg.latent_size != 0)
        throw std::invalid_argument("codec: image_size must be divisible by latent_size");
    int p = cfg.image_size / cfg.latent_size;
    if (cfg.mode == CodecMode::orthogonal_patch && 3 * p * p < cfg.latent_channels)
        throw std::invalid_argument(
            "codec: orthogonal mode needs patch area * 3 >= latent_channels");
}

int tiny_stages(const CodecConfig& cfg) {
    int ratio = cfg.image_size / cfg.latent_size;
    int stages = 0;
    while (ratio > 1) {
        if (ratio % 2 != 0)
            throw std::invalid_argument("codec: tiny mode needs a power-of-two size ratio");
        ratio /= 2;
        ++stages;
    }
    if (stages < 1) throw std::invalid_argument("codec: tiny mode needs image > latent size");
    return stages;
}

constexpr int kTinyHidden = 16;

}  // namespace

Tensor LatentCodec::find(const std::string& name) const {
    for (const auto& [n, t] : params_)
        if (n == name) return t;
    throw std::runtime_error("codec: missing parameter " + name);
}

LatentCodec make_orthogonal_codec(const CodecConfig& cfg) {
    CodecConfig c = cfg;
    c.mode = CodecMode::orthogonal_patch;
    check_codec_config(c);
    int p = c.image_size / c.latent_size;
    int64_t P = 3LL * p * p, Cz = c.latent_channels;

    Rng rng(c.seed);
    std::vector<double> g(size_t(Cz * P));
    for (auto& v : g) v = rng.normal();
    orthonormalize_rows(g, Cz, P);

    Tensor dec_w = Tensor::zeros({Cz, P});  // rows of the orthonormal basis
    Tensor enc_w = Tensor::zeros({P, Cz});
    for (int64_t r = 0; r < Cz; ++r)
        for (int64_t col = 0; col < P; ++col) {
            dec_w.data()[r * P + col] = float(g[size_t(r * P + col)]);
            enc_w.data()[col * Cz + r] = float(g[size_t(r * P + col)]);
        }
    LatentCodec codec;
    codec.cfg_ = c;
    codec.params_ = {{"enc_w", enc_w}, {"dec_w", dec_w}};
    codec.frozen_ = true;
    return codec;
}

Tensor LatentCodec::encode(const Tensor& image) const {
    Tensor img = image;
    bool squeezed = false;
    if (img.rank() == 3) {
        img = reshape_copy(img, {1, img.dim(0), img.dim(1), img.dim(2)});
        squeezed = true;
    }
    if (img.rank() != 4 || img.dim(1) != 3 || img.dim(2) != cfg_.image_size ||
        img.dim(3) != cfg_.image_size)
        tensor_error("codec encode: expected 3×" + std::to_string(cfg_.image_size) + "×" +
                     std::to_string(cfg_.image_size) + " image, got " +
                     shape_str(image.shape()));
    Tensor z;
    if (cfg_.mode == CodecMode::orthogonal_patch) {
        Tensor patches = space_to_depth(img, patch());
        Tensor tok = nchw_to_tokens(patches);
        Tensor ztok = linear(tok, find("enc_w"), Tensor());
        z = tokens_to_nchw(ztok, cfg_.latent_size, cfg_.latent_size);
    } else {
        z = encode_tiny(img);
    }
    if (squeezed) z = reshape_copy(z, {z.dim(1), z.dim(2), z.dim(3)});
    return z;
}

Tensor LatentCodec::decode(const Tensor& latent) const {
    Tensor z = latent;
    bool squeezed = false;
    if (z.rank() == 3) {
        z = reshape_copy(z, {1, z.dim(0), z.dim(1), z.dim(2)});
        squeezed = true;
    }
    if (z.rank() != 4 || z.dim(1) != cfg_.latent_channels || z.dim(2) != cfg_.latent_size ||
        z.dim(3) != cfg_.latent_size)
        tensor_error("codec decode: expected " + std::to_string(cfg_.latent_channels) + "×" +
                     std::to_string(cfg_.latent_size) + "×" + std::to_string(cfg_.latent_size) +
                     " latent, got " + shape_str(latent.shape()));
    Tensor img;
    if (cfg_.mode == CodecMode::orthogonal_patch) {
        Tensor ztok = nchw_to_tokens(z);
        Tensor tok = linear(ztok, find("dec_w"), Tensor());
        Tensor patches = tokens_to_nchw(tok, cfg_.latent_size, cfg_.latent_size);
        img = depth_to_space(patches, patch());
    } else {
        img = decode_tiny(z);
    }
    if (squeezed) img = reshape_copy(img, {img.dim(1), img.dim(2), img.dim(3)});
    return img;
}

Tensor LatentCodec::encode_tiny(const Tensor& image) const {
    int stages = tiny_stages(cfg_);
    Tensor h = image;
    for (int s = 0; s < stages; ++s) {
        std::string tag = "enc" + std::to_string(s);
        h = conv2d(h, find(tag + "_w"), find(tag + "_b"), 2, 1);
        if (s + 1 < stages) h = silu(h);
    }
    return h;
}

Tensor LatentCodec::decode_tiny(const Tensor& latent) const {
    int stages = tiny_stages(cfg_);
    Tensor h = conv2d(latent, find("dec_in_w"), find("dec_in_b"), 1, 1);
    for (int s = 0; s < stages; ++s) {
        std::string tag = "dec" + std::to_string(s);
        h = upsample_nearest2x(silu(h));
        h = conv2d(h, find(tag + "_w"), find(tag + "_b"), 1, 1);
    }
    return h;
}

uint64_t LatentCodec::checksum() const {
    uint64_t h = 1469598103934665603ull;
    for (const auto& [name, t] : params_) {
        uint64_t c = t.checksum();
        for (int i = 0; i < 8; ++i) {
            h ^= (c >> (8 * i)) & 0xff;
            h *= 1099511628211ull;
        }
    }
    return h;
}

LatentCodec train_tiny_codec(const std::vector<Tensor>& images, int epochs, Rng& rng,
                             const CodecConfig& cfg, std::vector<double>* heldout_l1) {
    CodecConfig c = cfg;
    c.mode = cfg.mode;
    if (c.mode == CodecMode::orthogonal_patch)
        throw std::invalid_argument("train_tiny_codec: codec mode is orthogonal, not trainable");
    check_codec_config(c);
    if (images.size() < 5)
        throw std::invalid_argument("train_tiny_codec: need at least 5 images");
    int stages = tiny_stages(c);

    LatentCodec codec;
    codec.cfg_ = c;
    auto conv_init = [&](int64_t oc, int64_t ic, int64_t k) {
        double stdev = 1.0 / std::sqrt(double(ic * k * k));
        return Tensor::randn({oc, ic, k, k}, rng, stdev);
    };
    for (int s = 0; s < stages; ++s) {
        int64_t ic = (s == 0) ? 3 : kTinyHidden;
        int64_t oc = (s + 1 == stages) ? c.latent_channels : kTinyHidden;
        std::string tag = "enc" + std::to_string(s);
        codec.params_.emplace_back(tag + "_w", conv_init(oc, ic, 3));
        codec.params_.emplace_back(tag + "_b", Tensor::zeros({oc}));
    }
    codec.params_.emplace_back("dec_in_w", conv_init(kTinyHidden, c.latent_channels, 3));
    codec.params_.emplace_back("dec_in_b", Tensor::zeros({kTinyHidden}));
    for (int s = 0; s < stages; ++s) {
        int64_t oc = (s + 1 == stages) ? 3 : kTinyHidden;
        std::string tag = "dec" + std::to_string(s);
        codec.params_.emplace_back(tag + "_w", conv_init(oc, kTinyHidden, 3));
        codec.params_.emplace_back(tag + "_b", Tensor::zeros({oc}));
    }

    // hold out the tail fifth for the reconstruction metric
    size_t n_hold = std::max<size_t>(1, images.size() / 5);
    size_t n_train = images.size() - n_hold;
    auto stack = [](const std::vector<Tensor>& v, size_t lo, size_t hi) {
        int64_t s = v[lo].dim(1);
        Tensor batch = Tensor::zeros({int64_t(hi - lo), 3, s, s});
        for (size_t i = lo; i < hi; ++i)
            std::copy(v[i].data(), v[i].data() + v[i].numel(),
                      batch.data() + int64_t(i - lo) * v[i].numel());
        return batch;
    };
    Tensor holdout = stack(images, n_train, images.size());

    auto heldout_metric = [&]() {
        NoGradGuard ng;
        Tensor rec = codec.decode(codec.encode(holdout));
        return double(l1_distance(rec, holdout, Reduction::mean).precise_item());
    };
    if (heldout_l1) heldout_l1->push_back(heldout_metric());

    std::vector<Tensor> trainable;
    for (auto& [name, t] : codec.params_) {
        t.set_requires_grad(true);
        trainable.push_back(t);
    }
    Adam opt(trainable, 3e-3);
    const size_t batch_size = 16;
    for (int e = 0; e < epochs; ++e) {
        std::vector<size_t> order(n_train);
        for (size_t i = 0; i < n_train; ++i) order[i] = i;
        rng.shuffle(order);
        for (size_t off = 0; off < n_train; off += batch_size) {
            size_t hi = std::min(n_train, off + batch_size);
            int64_t s = images[0].dim(1);
            Tensor batch = Tensor::zeros({int64_t(hi - off), 3, s, s});
            for (size_t i = off; i < hi; ++i)
                std::copy(images[order[i]].data(), images[order[i]].data() + images[order[i]].numel(),
                          batch.data() + int64_t(i - off) * images[order[i]].numel());
            Tensor rec = codec.decode(codec.encode(batch));
            Tensor loss = l1_distance(rec, batch, Reduction::mean);
            opt.zero_grad();
            backward(loss);
            opt.step();
        }
        if (heldout_l1) heldout_l1->push_back(heldout_metric());
    }
    for (auto& [name, t] : codec.params_) t.set_requires_grad(false);
    codec.frozen_ = true;
    return codec;
}

void LatentCodec::save(const std::string& dir) const {
    std::filesystem::create_directories(dir);
    std::vector<std::pair<std::string, std::string>> entries = {
        {"mode", cfg_.mode == CodecMode::orthogonal_patch ? "orthogonal-patch" : "tiny-trainable"},
        {"image_size", std::to_string(cfg_.image_size)},
        {"latent_size", std::to_string(cfg_.latent_size)},
        {"latent_channels", std::to_string(cfg_.latent_channels)},
        {"seed", std::to_string(cfg_.seed)},
    };
    write_kv_file(dir + "/manifest.txt", entries);
    for (const auto& [name, t] : params_) save_rkvt(t, dir + "/" + name + ".rkvt");
}

LatentCodec LatentCodec::load(const std::string& dir) {
    auto kv = read_kv_file(dir + "/manifest.txt");
    CodecConfig cfg;
    cfg.mode = kv.at("mode") == "orthogonal-patch" ? CodecMode::orthogonal_patch
                                                   : CodecMode::tiny_trainable;
    cfg.image_size = std::stoi(kv.at("image_size"));
    cfg.latent_size = std::stoi(kv.at("latent_size"));
    cfg.latent_channels = std::stoi(kv.at("latent_channels"));
    cfg.seed = std::stoull(kv.at("seed"));
    if (cfg.mode == CodecMode::orthogonal_patch) {
        // deterministic reconstruction from the recorded seed
        LatentCodec codec = make_orthogonal_codec(cfg);
        for (auto& [name, t] : codec.params_) t = load_rkvt(dir + "/" + name + ".rkvt");
        return codec;
    }
    LatentCodec codec;
    codec.cfg_ = cfg;
    int stages = tiny_stages(cfg);
    std::vector<std::string> names;
    for (int s = 0; s < stages; ++s) {
        names.push_back("enc" + std::to_string(s) + "_w");
        names.push_back("enc" + std::to_string(s) + "_b");
    }
    names.push_back("dec_in_w");
    names.push_back("dec_in_b");
    for (int s = 0; s < stages; ++s) {
        names.push_back("dec" + std::to_string(s) + "_w");
        names.push_back("dec" + std::to_string(s) + "_b");
    }
    for (const auto& n : names) codec.params_.emplace_back(n, load_rkvt(dir + "/" + n + ".rkvt"));
    codec.frozen_ = true;
    return codec;
}

}  // namespace refkv
