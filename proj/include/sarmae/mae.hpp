#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sarmae/rng.hpp"
#include "sarmae/tensor.hpp"

namespace sarmae {

using ParamMap = std::map<std::string, Tensor>;

inline Tensor& param(ParamMap& p, const std::string& name) {
    auto it = p.find(name);
    if (it == p.end()) throw std::runtime_error("missing parameter: " + name);
    return it->second;
}

inline std::int64_t count_params(const ParamMap& p, const std::string& prefix = "") {
    std::int64_t n = 0;
    for (const auto& [name, t] : p)
        if (name.rfind(prefix, 0) == 0) n += t.numel();
    return n;
}

struct MaeConfig {
    int image_size = 448;
    int patch_size = 16;
    int in_channels = 12;
    int enc_dim = 768;
    int enc_depth = 12;
    int enc_heads = 12;
    int dec_dim = 512;
    int dec_depth = 8;
    int dec_heads = 16;
    double mask_ratio = 0.75;
    bool use_cls_token = true;

    int grid_side() const { return image_size / patch_size; }
    int num_patches() const { return grid_side() * grid_side(); }
    int patch_dim() const { return patch_size * patch_size * in_channels; }

    void validate() const {
        if (image_size % patch_size != 0)
            throw std::invalid_argument("mae config: image_size must be divisible by patch_size");
        if (mask_ratio <= 0.0 || mask_ratio >= 1.0)
            throw std::invalid_argument("mae config: mask_ratio must lie in (0,1)");
        if (enc_dim % enc_heads != 0 || dec_dim % dec_heads != 0)
            throw std::invalid_argument("mae config: head count must divide width");
    }

    // small configuration used for all trained tests; the paper-scale
    // defaults above are shape-checked only
    static MaeConfig desk() {
        MaeConfig c;
        c.image_size = 64;
        c.patch_size = 8;
        c.in_channels = 12;
        c.enc_dim = 192;
        c.enc_depth = 4;
        c.enc_heads = 3;
        c.dec_dim = 96;
        c.dec_depth = 2;
        c.dec_heads = 3;
        return c;
    }
};

struct MaskPlan {
    int batch_index = 0;
    std::vector<int> kept_indices;
    std::vector<int> masked_indices;
    std::vector<int> restore_permutation;  // inverse of (kept ++ masked)
};

inline int masked_count(int num_tokens, double ratio) {
    // round-half-up, floored to keep at least one masked and one visible token
    int m = static_cast<int>(std::floor(ratio * num_tokens + 0.5));
    m = std::max(1, std::min(m, num_tokens - 1));
    return m;
}

// 2-D sine-cosine table, [grid*grid, dim]; quarter of the width per
// (axis, sin/cos) pair
inline std::vector<float> sincos_2d(int dim, int grid) {
    if (dim % 4 != 0) throw std::invalid_argument("sincos_2d: dim must be divisible by 4");
    const int quarter = dim / 4;
    std::vector<float> table(static_cast<std::size_t>(grid) * grid * dim);
    for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx) {
            float* row = table.data() + (static_cast<std::size_t>(gy) * grid + gx) * dim;
            for (int i = 0; i < quarter; ++i) {
                const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / quarter);
                row[2 * i] = static_cast<float>(std::sin(gy * omega));
                row[2 * i + 1] = static_cast<float>(std::cos(gy * omega));
                row[2 * quarter + 2 * i] = static_cast<float>(std::sin(gx * omega));
                row[2 * quarter + 2 * i + 1] = static_cast<float>(std::cos(gx * omega));
            }
        }
    return table;
}

// img [n,C,H,W] -> [n, num_patches, p*p*C]; patches ordered row-major over the
// grid, each token channel-major
inline Tensor patchify(const Tensor& img, const MaeConfig& cfg) {
    if (img.rank() != 4 || img.dim(1) != cfg.in_channels || img.dim(2) != cfg.image_size ||
        img.dim(3) != cfg.image_size)
        shape_error("patchify: expected [n," + std::to_string(cfg.in_channels) + "," +
                    std::to_string(cfg.image_size) + "," + std::to_string(cfg.image_size) +
                    "], got " + shape_str(img.shape()));
    const std::int64_t n = img.dim(0), C = cfg.in_channels, p = cfg.patch_size;
    const std::int64_t g = cfg.grid_side(), L = cfg.num_patches(), pd = cfg.patch_dim();
    // [n,C,g,p,g,p] -> [n,g,g,C,p,p]
    auto x = reshape(img, {n, C, g, p, g, p});
    auto perm = permute(x, {0, 2, 4, 1, 3, 5});
    return reshape(perm, {n, L, pd});
}

inline Tensor unpatchify(const Tensor& tokens, const MaeConfig& cfg) {
    const std::int64_t n = tokens.dim(0), C = cfg.in_channels, p = cfg.patch_size;
    const std::int64_t g = cfg.grid_side();
    if (tokens.rank() != 3 || tokens.dim(1) != cfg.num_patches() ||
        tokens.dim(2) != cfg.patch_dim())
        shape_error("unpatchify: got " + shape_str(tokens.shape()));
    auto x = reshape(tokens, {n, g, g, C, p, p});
    auto perm = permute(x, {0, 3, 1, 4, 2, 5});
    return reshape(perm, {n, C, g * p, g * p});
}

// Per-sample uniform shuffle; first L_keep positions stay visible. Sample s
// draws from rng.fork(s) so batch-parallel evaluation cannot change plans.
inline std::pair<Tensor, std::vector<MaskPlan>> random_mask(const Tensor& tokens, double ratio,
                                                            const Rng& rng) {
    if (ratio <= 0.0 || ratio >= 1.0) throw std::invalid_argument("random_mask: ratio in (0,1)");
    const std::int64_t n = tokens.dim(0), L = tokens.dim(1);
    const int masked = masked_count(static_cast<int>(L), ratio);
    const int keep = static_cast<int>(L) - masked;
    std::vector<MaskPlan> plans(static_cast<std::size_t>(n));
    std::vector<std::vector<int>> keep_idx(static_cast<std::size_t>(n));
    for (std::int64_t s = 0; s < n; ++s) {
        Rng sr = rng.fork(static_cast<std::uint64_t>(s));
        std::vector<int> perm(static_cast<std::size_t>(L));
        std::iota(perm.begin(), perm.end(), 0);
        sr.shuffle(perm);
        MaskPlan& plan = plans[s];
        plan.batch_index = static_cast<int>(s);
        plan.kept_indices.assign(perm.begin(), perm.begin() + keep);
        plan.masked_indices.assign(perm.begin() + keep, perm.end());
        plan.restore_permutation.resize(static_cast<std::size_t>(L));
        for (int i = 0; i < static_cast<int>(L); ++i) plan.restore_permutation[perm[i]] = i;
        keep_idx[s] = plan.kept_indices;
    }
    return {gather_tokens(tokens, keep_idx), std::move(plans)};
}

namespace detail {

inline void init_linear(ParamMap& p, const std::string& prefix, int in, int out, Rng& rng) {
    p.emplace(prefix + ".w", Tensor::trunc_normal({in, out}, rng, 0.02, true));
    p.emplace(prefix + ".b", Tensor::zeros({out}, true));
}

inline void init_layernorm(ParamMap& p, const std::string& prefix, int dim) {
    p.emplace(prefix + ".gamma", Tensor::ones({dim}, true));
    p.emplace(prefix + ".beta", Tensor::zeros({dim}, true));
}

inline void init_block(ParamMap& p, const std::string& prefix, int dim, Rng& rng) {
    init_layernorm(p, prefix + ".ln1", dim);
    init_linear(p, prefix + ".qkv", dim, 3 * dim, rng);
    init_linear(p, prefix + ".proj", dim, dim, rng);
    init_layernorm(p, prefix + ".ln2", dim);
    init_linear(p, prefix + ".fc1", dim, 4 * dim, rng);
    init_linear(p, prefix + ".fc2", 4 * dim, dim, rng);
}

// broadcast a [1,T,d] tensor (or row table) to [n,K,d] through an index gather
inline Tensor rows_for_batch(const Tensor& table2d, const std::vector<std::vector<int>>& idx) {
    auto t3 = reshape(table2d, {1, table2d.dim(0), table2d.dim(1)});
    return gather_tokens(t3, idx);
}

}  // namespace detail

// Pre-norm transformer block with MHSA and a ratio-4 MLP (GELU).
inline Tensor vit_block(const Tensor& x, ParamMap& p, const std::string& prefix, int heads) {
    const std::int64_t n = x.dim(0), T = x.dim(1), D = x.dim(2);
    const std::int64_t dh = D / heads;
    auto h = layernorm(x, param(p, prefix + ".ln1.gamma"), param(p, prefix + ".ln1.beta"));
    auto qkv = linear(h, param(p, prefix + ".qkv.w"), param(p, prefix + ".qkv.b"));
    auto split_heads = [&](const Tensor& t) {
        auto r = reshape(t, {n, T, heads, dh});
        return reshape(permute(r, {0, 2, 1, 3}), {n * heads, T, dh});
    };
    auto q = split_heads(slice(qkv, 2, 0, D));
    auto k = split_heads(slice(qkv, 2, D, D));
    auto v = split_heads(slice(qkv, 2, 2 * D, D));
    auto scores = mul(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
    auto ctx = matmul(softmax(scores), v);
    auto merged = reshape(permute(reshape(ctx, {n, heads, T, dh}), {0, 2, 1, 3}), {n, T, D});
    auto attn_out = linear(merged, param(p, prefix + ".proj.w"), param(p, prefix + ".proj.b"));
    auto x1 = add(x, attn_out);
    auto m = layernorm(x1, param(p, prefix + ".ln2.gamma"), param(p, prefix + ".ln2.beta"));
    auto mlp = linear(gelu(linear(m, param(p, prefix + ".fc1.w"), param(p, prefix + ".fc1.b"))),
                      param(p, prefix + ".fc2.w"), param(p, prefix + ".fc2.b"));
    return add(x1, mlp);
}

// MAE model: token embedding + ViT encoder + lightweight reconstruction
// decoder. Positional embeddings are learnable parameters initialized to the
// fixed 2-D sine-cosine table (row 0, the cls slot, starts at zero).
class MaeModel {
public:
    MaeModel(MaeConfig cfg, Rng rng) : cfg_(cfg) {
        cfg_.validate();
        Rng enc_rng = rng.fork(1), dec_rng = rng.fork(2);
        const int L = cfg_.num_patches();
        detail::init_linear(params_, "enc.patch_embed", cfg_.patch_dim(), cfg_.enc_dim, enc_rng);
        params_.emplace("enc.cls_token",
                        Tensor::trunc_normal({1, 1, cfg_.enc_dim}, enc_rng, 0.02, true));
        params_.emplace("enc.pos", pos_table(cfg_.enc_dim, cfg_.grid_side()));
        for (int b = 0; b < cfg_.enc_depth; ++b)
            detail::init_block(params_, "enc.block" + std::to_string(b), cfg_.enc_dim, enc_rng);
        detail::init_layernorm(params_, "enc.norm", cfg_.enc_dim);

        detail::init_linear(params_, "dec.embed", cfg_.enc_dim, cfg_.dec_dim, dec_rng);
        params_.emplace("dec.mask_token",
                        Tensor::trunc_normal({1, cfg_.dec_dim}, dec_rng, 0.02, true));
        params_.emplace("dec.pos", pos_table(cfg_.dec_dim, cfg_.grid_side()));
        for (int b = 0; b < cfg_.dec_depth; ++b)
            detail::init_block(params_, "dec.block" + std::to_string(b), cfg_.dec_dim, dec_rng);
        detail::init_layernorm(params_, "dec.norm", cfg_.dec_dim);
        detail::init_linear(params_, "dec.pred", cfg_.dec_dim, cfg_.patch_dim(), dec_rng);
        (void)L;
    }

    const MaeConfig& config() const { return cfg_; }
    ParamMap& params() { return params_; }
    const ParamMap& params() const { return params_; }

    // visible patch tokens [n,L_keep,patch_dim] -> latent [n, L_keep(+1), enc_dim]
    Tensor encode(const Tensor& visible, const std::vector<MaskPlan>& plans) {
        const std::int64_t n = visible.dim(0);
        std::vector<std::vector<int>> pos_idx(static_cast<std::size_t>(n));
        for (std::int64_t s = 0; s < n; ++s) {
            pos_idx[s].reserve(plans[s].kept_indices.size());
            for (int i : plans[s].kept_indices) pos_idx[s].push_back(i + 1);
        }
        auto emb = linear(visible, param(params_, "enc.patch_embed.w"),
                          param(params_, "enc.patch_embed.b"));
        auto tokens = add(emb, detail::rows_for_batch(param(params_, "enc.pos"), pos_idx));
        return encoder_trunk(tokens, n);
    }

    // full image path used by the downstream heads: [n,C,H,W] -> [n, 1+L, enc_dim]
    Tensor encode_image(const Tensor& img) {
        const std::int64_t n = img.dim(0);
        const int L = cfg_.num_patches();
        std::vector<std::vector<int>> pos_idx(static_cast<std::size_t>(n));
        for (auto& v : pos_idx) {
            v.resize(static_cast<std::size_t>(L));
            std::iota(v.begin(), v.end(), 1);
        }
        auto emb = linear(patchify(img, cfg_), param(params_, "enc.patch_embed.w"),
                          param(params_, "enc.patch_embed.b"));
        auto tokens = add(emb, detail::rows_for_batch(param(params_, "enc.pos"), pos_idx));
        return encoder_trunk(tokens, n);
    }

    // latent from encode() -> per-patch reconstructions [n, L, patch_dim]
    Tensor decode(const Tensor& latent, const std::vector<MaskPlan>& plans) {
        const std::int64_t n = latent.dim(0);
        const int L = cfg_.num_patches();
        auto lat = linear(latent, param(params_, "dec.embed.w"), param(params_, "dec.embed.b"));
        const std::int64_t keep = static_cast<std::int64_t>(plans[0].kept_indices.size());
        Tensor vis = cfg_.use_cls_token ? slice(lat, 1, 1, keep) : lat;
        const std::int64_t n_masked = L - keep;
        std::vector<std::vector<int>> zeros_idx(static_cast<std::size_t>(n),
                                                std::vector<int>(n_masked, 0));
        auto mask_tokens = detail::rows_for_batch(param(params_, "dec.mask_token"), zeros_idx);
        auto shuffled = concat<float>({vis, mask_tokens}, 1);
        std::vector<std::vector<int>> restore(static_cast<std::size_t>(n));
        for (std::int64_t s = 0; s < n; ++s) restore[s] = plans[s].restore_permutation;
        auto full = gather_tokens(shuffled, restore);
        std::vector<std::vector<int>> pos_idx(static_cast<std::size_t>(n));
        for (auto& v : pos_idx) {
            v.resize(static_cast<std::size_t>(L));
            std::iota(v.begin(), v.end(), 1);
        }
        auto seq = add(full, detail::rows_for_batch(param(params_, "dec.pos"), pos_idx));
        if (cfg_.use_cls_token) {
            std::vector<std::vector<int>> cls_pos(static_cast<std::size_t>(n),
                                                  std::vector<int>{0});
            auto cls = add(slice(lat, 1, 0, 1),
                           detail::rows_for_batch(param(params_, "dec.pos"), cls_pos));
            seq = concat<float>({cls, seq}, 1);
        }
        for (int b = 0; b < cfg_.dec_depth; ++b)
            seq = vit_block(seq, params_, "dec.block" + std::to_string(b), cfg_.dec_heads);
        seq = layernorm(seq, param(params_, "dec.norm.gamma"), param(params_, "dec.norm.beta"));
        auto pred = linear(seq, param(params_, "dec.pred.w"), param(params_, "dec.pred.b"));
        if (cfg_.use_cls_token) pred = slice(pred, 1, 1, L);
        return pred;
    }

    // analytic counts, checked against enumeration in the tests
    static std::int64_t encoder_param_count(const MaeConfig& c) {
        const std::int64_t D = c.enc_dim, L = c.num_patches();
        std::int64_t n = static_cast<std::int64_t>(c.patch_dim()) * D + D;  // patch embed
        if (c.use_cls_token) n += D;
        n += (L + 1) * D;  // positional table
        n += c.enc_depth * block_param_count(D);
        n += 2 * D;  // final norm
        return n;
    }

    static std::int64_t decoder_param_count(const MaeConfig& c) {
        const std::int64_t D = c.dec_dim, L = c.num_patches();
        std::int64_t n = static_cast<std::int64_t>(c.enc_dim) * D + D;  // embed
        n += D;                                                         // mask token
        n += (L + 1) * D;
        n += c.dec_depth * block_param_count(D);
        n += 2 * D;
        n += D * static_cast<std::int64_t>(c.patch_dim()) + c.patch_dim();  // prediction
        return n;
    }

    static std::int64_t block_param_count(std::int64_t D) {
        return 2 * D                    // ln1
               + D * 3 * D + 3 * D      // qkv
               + D * D + D              // proj
               + 2 * D                  // ln2
               + D * 4 * D + 4 * D      // fc1
               + 4 * D * D + D;         // fc2
    }

private:
    Tensor pos_table(int dim, int grid) {
        const int L = grid * grid;
        std::vector<float> data(static_cast<std::size_t>(L + 1) * dim, 0.0f);
        auto table = sincos_2d(dim, grid);
        std::copy(table.begin(), table.end(), data.begin() + dim);
        return Tensor({L + 1, dim}, std::move(data), true);
    }

    Tensor encoder_trunk(Tensor tokens, std::int64_t n) {
        if (cfg_.use_cls_token) {
            std::vector<std::vector<int>> zero(static_cast<std::size_t>(n), std::vector<int>{0});
            auto cls = gather_tokens(param(params_, "enc.cls_token"), zero);
            std::vector<std::vector<int>> cls_pos(static_cast<std::size_t>(n),
                                                  std::vector<int>{0});
            cls = add(cls, detail::rows_for_batch(param(params_, "enc.pos"), cls_pos));
            tokens = concat<float>({cls, tokens}, 1);
        }
        for (int b = 0; b < cfg_.enc_depth; ++b)
            tokens = vit_block(tokens, params_, "enc.block" + std::to_string(b), cfg_.enc_heads);
        return layernorm(tokens, param(params_, "enc.norm.gamma"), param(params_, "enc.norm.beta"));
    }

    MaeConfig cfg_;
    ParamMap params_;
};

// MSE over masked tokens only; visible predictions never contribute.
inline Tensor mae_loss(const Tensor& pred, const Tensor& target_patches,
                       const std::vector<MaskPlan>& plans) {
    if (pred.shape() != target_patches.shape()) shape_error("mae_loss shapes differ");
    const std::int64_t n = pred.dim(0);
    std::vector<std::vector<int>> masked(static_cast<std::size_t>(n));
    for (std::int64_t s = 0; s < n; ++s) {
        if (plans[s].masked_indices.empty())
            throw std::invalid_argument("mae_loss: empty masked set");
        masked[s] = plans[s].masked_indices;
    }
    return mse(gather_tokens(pred, masked), gather_tokens(target_patches, masked));
}

}  // namespace sarmae
