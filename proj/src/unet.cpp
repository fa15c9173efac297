#include "refkv/unet.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>
#include <stdexcept>

#include "refkv/autodiff.hpp"
#include "refkv/manifest.hpp"
#include "refkv/tensor_io.hpp"

namespace refkv {

Mechanism mechanism_from_string(const std::string& s) {
    if (s == "channel-concat") return Mechanism::channel_concat;
    if (s == "cross-attention") return Mechanism::cross_attention;
    if (s == "spatial-concat") return Mechanism::spatial_concat;
    if (s == "cachekv") return Mechanism::cachekv;
    throw std::invalid_argument("unknown mechanism '" + s + "'");
}

std::string to_string(Mechanism m) {
    switch (m) {
        case Mechanism::channel_concat: return "channel-concat";
        case Mechanism::cross_attention: return "cross-attention";
        case Mechanism::spatial_concat: return "spatial-concat";
        case Mechanism::cachekv: return "cachekv";
    }
    throw std::invalid_argument("unknown mechanism");
}

UNetConfig paper_unet_config() {
    UNetConfig c;
    c.in_channels = 16;
    c.out_channels = 8;
    c.base_channels = 160;
    c.channel_multipliers = {1, 2, 2, 4};
    c.num_res_blocks = 2;
    c.attention_resolutions = {32, 16, 8};
    c.timestep_embed_dim = 256;
    c.latent_size = 64;
    c.norm_groups = 8;
    return c;
}

UNetConfig desk_unet_config(Mechanism m) {
    UNetConfig c;
    c.mechanism = m;
    return c;
}

KVCache KVCache::replicated(int n) const {
    if (n < 1) throw std::invalid_argument("KVCache::replicated: count must be >= 1");
    KVCache out;
    out.ref_count = ref_count * n;
    out.source_checksum = source_checksum;
    out.layers.resize(layers.size());
    for (size_t i = 0; i < layers.size(); ++i) {
        const Tensor& k = layers[i].k;
        const Tensor& v = layers[i].v;
        int64_t B = k.dim(0), T = k.dim(1), D = k.dim(2);
        Tensor kk = Tensor::zeros({B, T * n, D});
        Tensor vv = Tensor::zeros({B, T * n, D});
        for (int64_t b = 0; b < B; ++b)
            for (int r = 0; r < n; ++r) {
                std::copy(k.data() + b * T * D, k.data() + (b + 1) * T * D,
                          kk.data() + (b * n + r) * T * D);
                std::copy(v.data() + b * T * D, v.data() + (b + 1) * T * D,
                          vv.data() + (b * n + r) * T * D);
            }
        out.layers[i] = {kk, vv};
    }
    return out;
}

std::string Counters::report() const {
    std::ostringstream os;
    os << "unet_passes = " << unet_passes << "\n";
    os << "extract_passes = " << extract_passes << "\n";
    os << "attention_token_units = " << attention_token_units << "\n";
    os << "attention_token_units_extract = " << attention_token_units_extract << "\n";
    os << "flops_estimate = " << flops_estimate << "\n";
    return os.str();
}

namespace {

Tensor conv_w_init(Rng& rng, int64_t oc, int64_t ic, int64_t k, double gain = 1.0) {
    return Tensor::randn({oc, ic, k, k}, rng, gain / std::sqrt(double(ic * k * k)));
}

Tensor lin_w_init(Rng& rng, int64_t d, int64_t e, double gain = 1.0) {
    return Tensor::randn({d, e}, rng, gain / std::sqrt(double(d)));
}

}  // namespace

UNet build_model(const UNetConfig& cfg, Rng& rng) {
    if (cfg.in_channels != 2 * cfg.out_channels)
        throw std::invalid_argument("unet: in_channels must be 2 * out_channels");
    if (cfg.channel_multipliers.empty())
        throw std::invalid_argument("unet: empty channel multiplier ladder");
    for (int m : cfg.channel_multipliers)
        if (m < 1) throw std::invalid_argument("unet: channel multipliers must be >= 1");
    if (cfg.base_channels % cfg.norm_groups != 0)
        throw std::invalid_argument("unet: base_channels must be divisible by norm_groups");
    if (cfg.num_res_blocks < 1) throw std::invalid_argument("unet: need >= 1 res block");
    if (cfg.timestep_embed_dim < 2 || cfg.timestep_embed_dim % 2 != 0)
        throw std::invalid_argument("unet: timestep_embed_dim must be even and >= 2");
    int levels = int(cfg.channel_multipliers.size());
    std::vector<int> ladder;
    for (int i = 0; i < levels; ++i) {
        int res = cfg.latent_size >> i;
        if (res < 1 || (cfg.latent_size % (1 << i)) != 0)
            throw std::invalid_argument("unet: latent_size does not support the ladder depth");
        ladder.push_back(res);
    }
    for (int r : cfg.attention_resolutions)
        if (std::find(ladder.begin(), ladder.end(), r) == ladder.end())
            throw std::invalid_argument(
                "unet: attention resolution " + std::to_string(r) +
                " is not produced by the multiplier ladder");
    if (cfg.max_refs < 0) throw std::invalid_argument("unet: max_refs must be >= 0");

    UNet net;
    net.cfg_ = cfg;
    net.seed_ = rng.seed();

    auto reg = [&net](const std::string& name, Tensor t) {
        net.params_.emplace_back(name, t);
        return t;
    };
    auto attn_at = [&](int res) {
        return std::find(cfg.attention_resolutions.begin(), cfg.attention_resolutions.end(),
                         res) != cfg.attention_resolutions.end();
    };
    auto make_res = [&](const std::string& name, int in_ch, int out_ch) {
        UNet::ResBlock rb;
        rb.in_ch = in_ch;
        rb.out_ch = out_ch;
        rb.gn1_g = reg(name + ".gn1_g", Tensor::full({in_ch}, 1.0f));
        rb.gn1_b = reg(name + ".gn1_b", Tensor::zeros({in_ch}));
        rb.conv1_w = reg(name + ".conv1_w", conv_w_init(rng, out_ch, in_ch, 3));
        rb.conv1_b = reg(name + ".conv1_b", Tensor::zeros({out_ch}));
        rb.temb_w1 = reg(name + ".temb_w1",
                         lin_w_init(rng, cfg.timestep_embed_dim, cfg.timestep_embed_dim));
        rb.temb_b1 = reg(name + ".temb_b1", Tensor::zeros({cfg.timestep_embed_dim}));
        rb.temb_w2 = reg(name + ".temb_w2", lin_w_init(rng, cfg.timestep_embed_dim, out_ch));
        rb.temb_b2 = reg(name + ".temb_b2", Tensor::zeros({out_ch}));
        rb.gn2_g = reg(name + ".gn2_g", Tensor::full({out_ch}, 1.0f));
        rb.gn2_b = reg(name + ".gn2_b", Tensor::zeros({out_ch}));
        rb.conv2_w = reg(name + ".conv2_w", conv_w_init(rng, out_ch, out_ch, 3));
        rb.conv2_b = reg(name + ".conv2_b", Tensor::zeros({out_ch}));
        if (in_ch != out_ch) {
            rb.skip_w = reg(name + ".skip_w", conv_w_init(rng, out_ch, in_ch, 1));
            rb.skip_b = reg(name + ".skip_b", Tensor::zeros({out_ch}));
        }
        return rb;
    };
    auto make_attn = [&](const std::string& name, int ch) {
        if (ch % cfg.num_heads != 0)
            throw std::invalid_argument("unet: channels not divisible by head count");
        UNet::AttnLayer al;
        al.layer_id = net.n_attn_layers_++;
        al.channels = ch;
        al.gn_g = reg(name + ".gn_g", Tensor::full({ch}, 1.0f));
        al.gn_b = reg(name + ".gn_b", Tensor::zeros({ch}));
        al.wq = reg(name + ".wq", lin_w_init(rng, ch, ch));
        al.bq = reg(name + ".bq", Tensor::zeros({ch}));
        al.wk = reg(name + ".wk", lin_w_init(rng, ch, ch));
        al.bk = reg(name + ".bk", Tensor::zeros({ch}));
        al.wv = reg(name + ".wv", lin_w_init(rng, ch, ch));
        al.bv = reg(name + ".bv", Tensor::zeros({ch}));
        al.wo = reg(name + ".wo", lin_w_init(rng, ch, ch));
        al.bo = reg(name + ".bo", Tensor::zeros({ch}));
        if (cfg.mechanism == Mechanism::cross_attention) {
            al.xgn_g = reg(name + ".xgn_g", Tensor::full({ch}, 1.0f));
            al.xgn_b = reg(name + ".xgn_b", Tensor::zeros({ch}));
            al.xwq = reg(name + ".xwq", lin_w_init(rng, ch, ch));
            al.xbq = reg(name + ".xbq", Tensor::zeros({ch}));
            al.xwk = reg(name + ".xwk", lin_w_init(rng, cfg.out_channels, ch));
            al.xwv = reg(name + ".xwv", lin_w_init(rng, cfg.out_channels, ch));
            al.xwo = reg(name + ".xwo", lin_w_init(rng, ch, ch));
            al.xbo = reg(name + ".xbo", Tensor::zeros({ch}));
        }
        net.attn_layers_.push_back(al);
        return al.layer_id;
    };

    int in_total = cfg.in_channels;
    if (cfg.mechanism == Mechanism::channel_concat)
        in_total += cfg.max_refs * cfg.out_channels;
    net.conv_in_w = reg("conv_in_w", conv_w_init(rng, cfg.base_channels, in_total, 3));
    net.conv_in_b = reg("conv_in_b", Tensor::zeros({cfg.base_channels}));

    net.levels_.resize(size_t(levels));
    int ch = cfg.base_channels;
    for (int i = 0; i < levels; ++i) {
        UNet::Level& lvl = net.levels_[size_t(i)];
        int out_ch = cfg.base_channels * cfg.channel_multipliers[size_t(i)];
        for (int b = 0; b < cfg.num_res_blocks; ++b) {
            std::string name = "down" + std::to_string(i) + ".res" + std::to_string(b);
            lvl.blocks.push_back(make_res(name, ch, out_ch));
            ch = out_ch;
            lvl.attn.push_back(attn_at(ladder[size_t(i)])
                                   ? make_attn("down" + std::to_string(i) + ".attn" +
                                                   std::to_string(b), ch)
                                   : -1);
        }
        if (i + 1 < levels) {
            lvl.down_w = reg("down" + std::to_string(i) + ".down_w", conv_w_init(rng, ch, ch, 3));
            lvl.down_b = reg("down" + std::to_string(i) + ".down_b", Tensor::zeros({ch}));
        }
    }

    net.mid1_ = make_res("mid.res0", ch, ch);
    net.mid_attn_ = attn_at(ladder.back()) ? make_attn("mid.attn", ch) : -1;
    net.mid2_ = make_res("mid.res1", ch, ch);

    for (int i = levels - 1; i >= 0; --i) {
        UNet::Level& lvl = net.levels_[size_t(i)];
        int lvl_ch = cfg.base_channels * cfg.channel_multipliers[size_t(i)];
        for (int b = 0; b < cfg.num_res_blocks; ++b) {
            std::string name = "up" + std::to_string(i) + ".res" + std::to_string(b);
            int in_ch = (b == 0) ? ch + lvl_ch : lvl_ch;
            lvl.up_blocks.push_back(make_res(name, in_ch, lvl_ch));
            lvl.up_attn.push_back(attn_at(ladder[size_t(i)])
                                      ? make_attn("up" + std::to_string(i) + ".attn" +
                                                      std::to_string(b), lvl_ch)
                                      : -1);
        }
        ch = lvl_ch;
        if (i > 0) {
            lvl.up_w = reg("up" + std::to_string(i) + ".up_w", conv_w_init(rng, ch, ch, 3));
            lvl.up_b = reg("up" + std::to_string(i) + ".up_b", Tensor::zeros({ch}));
        }
    }

    net.out_gn_g = reg("out_gn_g", Tensor::full({ch}, 1.0f));
    net.out_gn_b = reg("out_gn_b", Tensor::zeros({ch}));
    // damped output conv keeps the initial z0 estimate near zero
    net.conv_out_w = reg("conv_out_w", conv_w_init(rng, cfg.out_channels, ch, 3, 0.1));
    net.conv_out_b = reg("conv_out_b", Tensor::zeros({cfg.out_channels}));
    return net;
}

int64_t UNet::param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : params_) n += t.numel();
    return n;
}

uint64_t UNet::checksum() const {
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

int UNet::attention_channels(int layer_id) const {
    for (const auto& al : attn_layers_)
        if (al.layer_id == layer_id) return al.channels;
    throw std::invalid_argument("unet: no attention layer " + std::to_string(layer_id));
}

void UNet::set_trainable(bool on) {
    for (auto& [name, t] : params_) t.set_requires_grad(on);
    if (on) invalidate_uncond_cache();
}

Tensor UNet::time_embedding(const std::vector<int>& t) const {
    int64_t B = int64_t(t.size());
    int64_t dim = cfg_.timestep_embed_dim;
    int64_t half = dim / 2;
    Tensor emb = Tensor::zeros({B, dim});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < half; ++i) {
            double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
            double a = double(t[size_t(b)]) * freq;
            emb.data()[b * dim + i] = float(std::sin(a));
            emb.data()[b * dim + half + i] = float(std::cos(a));
        }
    return emb;
}

Tensor UNet::res_forward(const ResBlock& rb, const Tensor& x, const Tensor& temb) {
    int64_t B = x.dim(0), H = x.dim(2), W = x.dim(3);
    Tensor h = group_norm(x, rb.gn1_g, rb.gn1_b, cfg_.norm_groups);
    h = conv2d(silu(h), rb.conv1_w, rb.conv1_b, 1, 1);
    counters_.flops_estimate += 2.0 * double(B * rb.out_ch * rb.in_ch * 9 * H * W);
    Tensor e = linear(silu(linear(temb, rb.temb_w1, rb.temb_b1)), rb.temb_w2, rb.temb_b2);
    counters_.flops_estimate +=
        2.0 * double(B) * cfg_.timestep_embed_dim * (cfg_.timestep_embed_dim + rb.out_ch);
    h = add_channel_bias(h, e);
    h = group_norm(h, rb.gn2_g, rb.gn2_b, cfg_.norm_groups);
    h = conv2d(silu(h), rb.conv2_w, rb.conv2_b, 1, 1);
    counters_.flops_estimate += 2.0 * double(B * rb.out_ch * rb.out_ch * 9 * H * W);
    Tensor skip = x;
    if (rb.skip_w.defined()) {
        skip = conv2d(x, rb.skip_w, rb.skip_b, 1, 0);
        counters_.flops_estimate += 2.0 * double(B * rb.out_ch * rb.in_ch * H * W);
    }
    return add(h, skip);
}

Tensor UNet::attend_with_cache(int layer_id, const Tensor& main_tokens,
                               const KVEntry* cache_entry) const {
    if (layer_id < 0 || layer_id >= n_attn_layers_)
        throw std::invalid_argument("attend_with_cache: no attention layer " +
                                    std::to_string(layer_id));
    const AttnLayer& al = attn_layers_[size_t(layer_id)];
    if (main_tokens.rank() != 3 || main_tokens.dim(2) != al.channels)
        tensor_error("attend_with_cache: tokens must be B×T×" + std::to_string(al.channels));
    Tensor q = linear(main_tokens, al.wq, al.bq);
    Tensor k = linear(main_tokens, al.wk, al.bk);
    Tensor v = linear(main_tokens, al.wv, al.bv);
    if (cache_entry && cache_entry->k.defined() && cache_entry->k.dim(1) > 0) {
        if (cache_entry->k.dim(2) != al.channels)
            tensor_error("attend_with_cache: cache entry feature axis " +
                         std::to_string(cache_entry->k.dim(2)) + " does not match layer " +
                         std::to_string(al.channels));
        k = concat_tokens(k, cache_entry->k);
        v = concat_tokens(v, cache_entry->v);
    }
    int heads = cfg_.num_heads;
    Tensor att = scaled_dot_attention(split_heads(q, heads), split_heads(k, heads),
                                      split_heads(v, heads));
    return merge_heads(att, heads);
}

Tensor UNet::attn_forward(const AttnLayer& al, const Tensor& x, ForwardCtx& ctx) {
    int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor tokens = nchw_to_tokens(group_norm(x, al.gn_g, al.gn_b, cfg_.norm_groups));
    int G = ctx.spatial_tiles;
    if (G > 1)  // tiles of one item attend jointly
        tokens = reshape_copy(tokens, {B / G, G * H * W, C});
    if (ctx.record) {
        Tensor k = linear(tokens, al.wk, al.bk);
        Tensor v = linear(tokens, al.wv, al.bv);
        ctx.record->layers[size_t(al.layer_id)] = {k, v};
    }
    const KVEntry* entry = nullptr;
    if (ctx.cache) entry = &ctx.cache->layers[size_t(al.layer_id)];
    Tensor att = attend_with_cache(al.layer_id, tokens, entry);
    int64_t rows = tokens.dim(0);
    int64_t Tq = tokens.dim(1);
    int64_t Tk = Tq + (entry && entry->k.defined() ? entry->k.dim(1) : 0);
    if (ctx.extract)
        counters_.attention_token_units_extract += rows * Tq;
    else
        counters_.attention_token_units += rows * Tq;
    counters_.flops_estimate += 2.0 * double(rows) * (4.0 * double(Tq * C * C) +
                                                      2.0 * double(Tq * Tk * C));
    if (G > 1) att = reshape_copy(att, {B, H * W, C});
    Tensor out = tokens_to_nchw(linear(att, al.wo, al.bo), H, W);
    Tensor h = add(x, out);

    if (cfg_.mechanism == Mechanism::cross_attention) {
        if (!ctx.ref_tokens.defined())
            tensor_error("unet: cross-attention pass without reference tokens");
        Tensor ctok = nchw_to_tokens(group_norm(h, al.xgn_g, al.xgn_b, cfg_.norm_groups));
        Tensor q = linear(ctok, al.xwq, al.xbq);
        Tensor k = linear(ctx.ref_tokens, al.xwk, Tensor());
        Tensor v = linear(ctx.ref_tokens, al.xwv, Tensor());
        int heads = cfg_.num_heads;
        Tensor att2 = scaled_dot_attention(split_heads(q, heads), split_heads(k, heads),
                                           split_heads(v, heads));
        Tensor out2 = tokens_to_nchw(linear(merge_heads(att2, heads), al.xwo, al.xbo), H, W);
        int64_t Tr = ctx.ref_tokens.dim(1);
        counters_.flops_estimate +=
            2.0 * double(B) * (2.0 * double(Tq * C * C) + 2.0 * double(Tr * cfg_.out_channels * C) +
                               2.0 * double(Tq * Tr * C));
        h = add(h, out2);
    }
    return h;
}

void UNet::validate_ref_input(const RefInput& ref, int64_t batch) const {
    if (cfg_.mechanism == Mechanism::cachekv) {
        if (!ref.cache)
            tensor_error("unet: cachekv mechanism requires a KVCache");
        if (!ref.ref_latents.empty())
            tensor_error("unet: cachekv mechanism does not accept raw reference latents");
        if (int(ref.cache->layers.size()) != n_attn_layers_)
            tensor_error("unet: cache layer count does not match this model");
        for (const auto& e : ref.cache->layers)
            if (e.k.defined() && e.k.dim(0) != batch)
                tensor_error("unet: cache batch axis does not match the input");
        return;
    }
    if (ref.cache)
        tensor_error("unet: KVCache passed to a " + to_string(cfg_.mechanism) + " model");
    for (const Tensor& r : ref.ref_latents)
        if (r.rank() != 4 || r.dim(0) != batch || r.dim(1) != cfg_.out_channels ||
            r.dim(2) != cfg_.latent_size || r.dim(3) != cfg_.latent_size)
            tensor_error("unet: reference latents must be B×" +
                         std::to_string(cfg_.out_channels) + "×" +
                         std::to_string(cfg_.latent_size) + "×" +
                         std::to_string(cfg_.latent_size));
    if (cfg_.mechanism == Mechanism::channel_concat &&
        int(ref.ref_latents.size()) > cfg_.max_refs)
        tensor_error("unet: channel-concat model accepts at most " +
                     std::to_string(cfg_.max_refs) + " references");
    if (cfg_.mechanism == Mechanism::cross_attention && ref.ref_latents.empty())
        tensor_error("unet: cross-attention needs reference latents "
                     "(pass zero latents for the unconditional branch)");
}

Tensor UNet::forward(const Tensor& z_t, const Tensor& z_lq, const std::vector<int>& t,
                     const RefInput& ref) {
    if (z_t.rank() != 4 || z_t.dim(1) != cfg_.out_channels ||
        z_t.dim(2) != cfg_.latent_size || z_t.dim(3) != cfg_.latent_size)
        tensor_error("unet: z_t must be B×" + std::to_string(cfg_.out_channels) + "×" +
                     std::to_string(cfg_.latent_size) + "×" + std::to_string(cfg_.latent_size) +
                     ", got " + shape_str(z_t.shape()));
    if (!z_t.same_shape(z_lq))
        tensor_error("unet: z_LQ shape " + shape_str(z_lq.shape()) +
                     " differs from z_t shape " + shape_str(z_t.shape()));
    int64_t B = z_t.dim(0);
    if (int64_t(t.size()) != B) tensor_error("unet: one timestep per batch item required");
    validate_ref_input(ref, B);

    Tensor x = concat_channels(z_t, z_lq);
    ForwardCtx ctx;
    if (cfg_.mechanism == Mechanism::cachekv) {
        ctx.cache = ref.cache;
    } else if (cfg_.mechanism == Mechanism::channel_concat) {
        for (const Tensor& r : ref.ref_latents) x = concat_channels(x, r);
        for (int i = int(ref.ref_latents.size()); i < cfg_.max_refs; ++i)
            x = concat_channels(x, Tensor::zeros({B, cfg_.out_channels, cfg_.latent_size,
                                                  cfg_.latent_size}));
    } else if (cfg_.mechanism == Mechanism::spatial_concat) {
        int G = 1 + int(ref.ref_latents.size());
        if (G > 1) {
            for (const Tensor& r : ref.ref_latents)
                x = concat_batch(x, concat_channels(r, Tensor::zeros(r.shape())));
            // tile-major to item-major rows
            std::vector<int64_t> perm(size_t(B) * size_t(G), 0);
            for (int64_t b = 0; b < B; ++b)
                for (int g = 0; g < G; ++g) perm[size_t(b * G + g)] = int64_t(g) * B + b;
            x = gather_rows(x, perm);
            ctx.spatial_tiles = G;
        }
    } else {  // cross_attention
        Tensor rt;
        for (const Tensor& r : ref.ref_latents) {
            Tensor tok = nchw_to_tokens(r);
            rt = rt.defined() ? concat_tokens(rt, tok) : tok;
        }
        ctx.ref_tokens = rt;
    }
    std::vector<int> t_run = t;
    if (ctx.spatial_tiles > 1) {
        t_run.clear();
        for (int64_t b = 0; b < B; ++b)
            for (int g = 0; g < ctx.spatial_tiles; ++g) t_run.push_back(t[size_t(b)]);
    }
    Tensor out = run(x, t_run, ctx);
    if (ctx.spatial_tiles > 1) {
        // read only the main positions (tile 0 of every item)
        std::vector<int64_t> main_rows(size_t(B), 0);
        for (int64_t b = 0; b < B; ++b) main_rows[size_t(b)] = b * ctx.spatial_tiles;
        out = gather_rows(out, main_rows);
    }
    return out;
}

Tensor UNet::run(const Tensor& input, const std::vector<int>& t, ForwardCtx& ctx) {
    int64_t B = input.dim(0);
    int64_t logical = B / ctx.spatial_tiles;
    counters_.unet_passes += logical;
    if (ctx.extract) counters_.extract_passes += logical;

    Tensor temb = time_embedding(t);
    Tensor h = conv2d(input, conv_in_w, conv_in_b, 1, 1);
    counters_.flops_estimate +=
        2.0 * double(B * conv_in_w.dim(0) * conv_in_w.dim(1) * 9 * input.dim(2) * input.dim(3));

    std::vector<Tensor> skips;
    int levels = int(levels_.size());
    for (int i = 0; i < levels; ++i) {
        Level& lvl = levels_[size_t(i)];
        for (size_t b = 0; b < lvl.blocks.size(); ++b) {
            h = res_forward(lvl.blocks[b], h, temb);
            if (lvl.attn[b] >= 0) h = attn_forward(attn_layers_[size_t(lvl.attn[b])], h, ctx);
        }
        skips.push_back(h);
        if (i + 1 < levels) {
            h = conv2d(h, lvl.down_w, lvl.down_b, 2, 1);
            counters_.flops_estimate +=
                2.0 * double(B * h.dim(1) * h.dim(1) * 9 * h.dim(2) * h.dim(3));
        }
    }

    h = res_forward(mid1_, h, temb);
    if (mid_attn_ >= 0) h = attn_forward(attn_layers_[size_t(mid_attn_)], h, ctx);
    h = res_forward(mid2_, h, temb);

    for (int i = levels - 1; i >= 0; --i) {
        Level& lvl = levels_[size_t(i)];
        h = concat_channels(h, skips[size_t(i)]);
        for (size_t b = 0; b < lvl.up_blocks.size(); ++b) {
            h = res_forward(lvl.up_blocks[b], h, temb);
            if (lvl.up_attn[b] >= 0)
                h = attn_forward(attn_layers_[size_t(lvl.up_attn[b])], h, ctx);
        }
        if (i > 0) {
            h = conv2d(upsample_nearest2x(h), lvl.up_w, lvl.up_b, 1, 1);
            counters_.flops_estimate +=
                2.0 * double(B * h.dim(1) * h.dim(1) * 9 * h.dim(2) * h.dim(3));
        }
    }

    h = group_norm(h, out_gn_g, out_gn_b, cfg_.norm_groups);
    h = conv2d(silu(h), conv_out_w, conv_out_b, 1, 1);
    counters_.flops_estimate +=
        2.0 * double(B * conv_out_w.dim(0) * conv_out_w.dim(1) * 9 * h.dim(2) * h.dim(3));
    return h;
}

namespace {
uint64_t combine_checksums(uint64_t h, uint64_t c) {
    for (int i = 0; i < 8; ++i) {
        h ^= (c >> (8 * i)) & 0xff;
        h *= 1099511628211ull;
    }
    return h;
}
}  // namespace

KVCache UNet::extract_cachekv_batch(const std::vector<Tensor>& refs) {
    if (cfg_.mechanism != Mechanism::cachekv)
        tensor_error("extract_cachekv: model mechanism is " + to_string(cfg_.mechanism));
    if (refs.empty())
        tensor_error("extract_cachekv: empty reference list (pass explicit zero latents "
                     "for the unconditional branch)");
    if (int(refs.size()) > cfg_.max_refs && cfg_.max_refs > 0)
        tensor_error("extract_cachekv: " + std::to_string(refs.size()) +
                     " references exceed the configured maximum " +
                     std::to_string(cfg_.max_refs));
    KVCache cache;
    cache.ref_count = int(refs.size());
    uint64_t src = 1469598103934665603ull;
    int64_t B = refs[0].dim(0);
    std::vector<int> t0(size_t(B), 0);
    for (const Tensor& r : refs) {
        if (r.rank() != 4 || r.dim(0) != B || r.dim(1) != cfg_.out_channels ||
            r.dim(2) != cfg_.latent_size || r.dim(3) != cfg_.latent_size)
            tensor_error("extract_cachekv: reference latents must be B×" +
                         std::to_string(cfg_.out_channels) + "×" +
                         std::to_string(cfg_.latent_size) + "×" +
                         std::to_string(cfg_.latent_size) + ", got " + shape_str(r.shape()));
        src = combine_checksums(src, r.checksum());
        KVCache pass;
        pass.layers.resize(size_t(n_attn_layers_));
        ForwardCtx ctx;
        ctx.record = &pass;
        ctx.extract = true;
        // [z_ref ; 0] fills the LQ channel slot; timestep embedding is t = 0
        Tensor padded_lq = Tensor::zeros(r.shape());
        Tensor discarded = run(concat_channels(r, padded_lq), t0, ctx);
        (void)discarded;
        if (cache.layers.empty()) {
            cache.layers = std::move(pass.layers);
        } else {
            for (int l = 0; l < n_attn_layers_; ++l) {
                cache.layers[size_t(l)].k =
                    concat_tokens(cache.layers[size_t(l)].k, pass.layers[size_t(l)].k);
                cache.layers[size_t(l)].v =
                    concat_tokens(cache.layers[size_t(l)].v, pass.layers[size_t(l)].v);
            }
        }
    }
    cache.source_checksum = src;
    return cache;
}

KVCache UNet::extract_cachekv(const std::vector<Tensor>& ref_latents) {
    std::vector<Tensor> batched;
    batched.reserve(ref_latents.size());
    for (const Tensor& r : ref_latents) {
        if (r.rank() == 3)
            batched.push_back(reshape_copy(r, {1, r.dim(0), r.dim(1), r.dim(2)}));
        else
            batched.push_back(r);
    }
    return extract_cachekv_batch(batched);
}

KVCache UNet::uncond_cache(int ref_count) {
    if (ref_count < 1) throw std::invalid_argument("uncond_cache: need ref_count >= 1");
    if (!uncond_single_) {
        NoGradGuard ng;
        Tensor zero = Tensor::zeros({1, cfg_.out_channels, cfg_.latent_size, cfg_.latent_size});
        uncond_single_ = extract_cachekv_batch({zero});
    }
    return ref_count == 1 ? *uncond_single_ : uncond_single_->replicated(ref_count);
}

void UNet::save(const std::string& dir, int64_t step,
                const std::vector<std::pair<std::string, std::string>>& extra) const {
    std::filesystem::create_directories(dir);
    std::ostringstream mults, attns;
    for (size_t i = 0; i < cfg_.channel_multipliers.size(); ++i)
        mults << (i ? "," : "") << cfg_.channel_multipliers[i];
    for (size_t i = 0; i < cfg_.attention_resolutions.size(); ++i)
        attns << (i ? "," : "") << cfg_.attention_resolutions[i];
    std::vector<std::pair<std::string, std::string>> entries = {
        {"mechanism", to_string(cfg_.mechanism)},
        {"in_channels", std::to_string(cfg_.in_channels)},
        {"out_channels", std::to_string(cfg_.out_channels)},
        {"base_channels", std::to_string(cfg_.base_channels)},
        {"channel_multipliers", mults.str()},
        {"num_res_blocks", std::to_string(cfg_.num_res_blocks)},
        {"attention_resolutions", attns.str()},
        {"timestep_embed_dim", std::to_string(cfg_.timestep_embed_dim)},
        {"num_heads", std::to_string(cfg_.num_heads)},
        {"max_refs", std::to_string(cfg_.max_refs)},
        {"latent_size", std::to_string(cfg_.latent_size)},
        {"norm_groups", std::to_string(cfg_.norm_groups)},
        {"seed", std::to_string(seed_)},
        {"step", std::to_string(step)},
    };
    for (const auto& e : extra) entries.push_back(e);
    write_kv_file(dir + "/manifest.txt", entries);
    for (const auto& [name, t] : params_) save_rkvt(t, dir + "/" + name + ".rkvt");
}

namespace {
std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::istringstream is(s);
    std::string tok;
    while (std::getline(is, tok, ',')) out.push_back(std::stoi(trim(tok)));
    return out;
}
}  // namespace

UNet UNet::load(const std::string& dir) {
    auto kv = read_kv_file(dir + "/manifest.txt");
    UNetConfig cfg;
    cfg.mechanism = mechanism_from_string(kv.at("mechanism"));
    cfg.in_channels = std::stoi(kv.at("in_channels"));
    cfg.out_channels = std::stoi(kv.at("out_channels"));
    cfg.base_channels = std::stoi(kv.at("base_channels"));
    cfg.channel_multipliers = parse_int_list(kv.at("channel_multipliers"));
    cfg.num_res_blocks = std::stoi(kv.at("num_res_blocks"));
    cfg.attention_resolutions = parse_int_list(kv.at("attention_resolutions"));
    cfg.timestep_embed_dim = std::stoi(kv.at("timestep_embed_dim"));
    cfg.num_heads = std::stoi(kv.at("num_heads"));
    cfg.max_refs = std::stoi(kv.at("max_refs"));
    cfg.latent_size = std::stoi(kv.at("latent_size"));
    cfg.norm_groups = std::stoi(kv.at("norm_groups"));
    Rng rng(std::stoull(kv.at("seed")));
    UNet net = build_model(cfg, rng);
    for (auto& [name, t] : net.params_) {
        Tensor loaded = load_rkvt(dir + "/" + name + ".rkvt");
        if (!loaded.same_shape(t))
            throw std::runtime_error("unet load: shape mismatch for " + name);
        std::copy(loaded.data(), loaded.data() + loaded.numel(), t.data());
    }
    return net;
}

int64_t UNet::load_step(const std::string& dir) {
    auto kv = read_kv_file(dir + "/manifest.txt");
    return std::stoll(kv.at("step"));
}

}  // namespace refkv
