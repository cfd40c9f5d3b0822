#pragma once

#include <string>
#include <vector>

#include "sarmae/checkpoint.hpp"
#include "sarmae/conv.hpp"
#include "sarmae/mae.hpp"

namespace sarmae {

struct RegressionHeadConfig {
    int seq_proj = 196;
    int hid_proj = 196;
    std::vector<int> fc_sizes = {512, 256, 128};

    void validate() const {
        if (seq_proj <= 0 || hid_proj <= 0)
            throw std::invalid_argument("regression head: projections must be positive");
        for (std::size_t i = 1; i < fc_sizes.size(); ++i)
            if (fc_sizes[i] >= fc_sizes[i - 1])
                throw std::invalid_argument("regression head: fc_sizes must be strictly decreasing");
    }

    static RegressionHeadConfig desk() { return {32, 32, {128, 64, 32}}; }
};

struct SegHeadConfig {
    int num_classes = 11;
    int stage_channels = 256;
    int num_upsample_stages = 4;

    void validate(int grid_side, int image_size) const {
        if ((std::int64_t{1} << num_upsample_stages) * grid_side != image_size)
            throw std::invalid_argument(
                "segmentation head: 2^stages * token grid must equal image size");
    }

    static SegHeadConfig desk() { return {11, 64, 3}; }
};

// Projection head for per-tile scalar regression: hidden axis then sequence
// axis mapped to (hid_proj, seq_proj), flattened, then the FC stack with ReLU
// between hidden layers and ELU before the affine output.
inline void init_regression_head(ParamMap& p, const RegressionHeadConfig& cfg, int seq_len,
                                 int enc_dim, Rng& rng) {
    cfg.validate();
    detail::init_linear(p, "head.hid", enc_dim, cfg.hid_proj, rng);
    detail::init_linear(p, "head.seq", seq_len, cfg.seq_proj, rng);
    int in = cfg.hid_proj * cfg.seq_proj;
    for (std::size_t i = 0; i < cfg.fc_sizes.size(); ++i) {
        detail::init_linear(p, "head.fc" + std::to_string(i), in, cfg.fc_sizes[i], rng);
        in = cfg.fc_sizes[i];
    }
    detail::init_linear(p, "head.out", in, 1, rng);
}

// tokens [n, L, enc_dim] without cls -> [n]
inline Tensor regression_forward(const Tensor& tokens, ParamMap& p,
                                 const RegressionHeadConfig& cfg) {
    const std::int64_t n = tokens.dim(0);
    auto h = linear(tokens, param(p, "head.hid.w"), param(p, "head.hid.b"));  // [n,L,hp]
    auto t = transpose(h);                                                    // [n,hp,L]
    auto s = linear(t, param(p, "head.seq.w"), param(p, "head.seq.b"));       // [n,hp,sp]
    auto x = reshape(s, {n, -1});
    for (std::size_t i = 0; i < cfg.fc_sizes.size(); ++i) {
        x = linear(x, param(p, "head.fc" + std::to_string(i) + ".w"),
                   param(p, "head.fc" + std::to_string(i) + ".b"));
        x = (i + 1 == cfg.fc_sizes.size()) ? elu(x) : relu(x);
    }
    auto out = linear(x, param(p, "head.out.w"), param(p, "head.out.b"));
    return reshape(out, {n});
}

inline std::int64_t regression_head_param_count(const RegressionHeadConfig& cfg, int seq_len,
                                                int enc_dim) {
    std::int64_t n = static_cast<std::int64_t>(enc_dim) * cfg.hid_proj + cfg.hid_proj;
    n += static_cast<std::int64_t>(seq_len) * cfg.seq_proj + cfg.seq_proj;
    std::int64_t in = static_cast<std::int64_t>(cfg.hid_proj) * cfg.seq_proj;
    for (int fc : cfg.fc_sizes) {
        n += in * fc + fc;
        in = fc;
    }
    n += in + 1;
    return n;
}

// SETR-PUP style decoder: 1x1 projection, then per stage a 3x3 conv, ReLU and
// a 2x bilinear upsample, then a 1x1 conv to class logits.
inline void init_seg_head(ParamMap& p, const SegHeadConfig& cfg, int enc_dim, Rng& rng) {
    const int C = cfg.stage_channels;
    p.emplace("head.in.w", Tensor::trunc_normal({C, enc_dim, 1, 1}, rng, 0.02, true));
    p.emplace("head.in.b", Tensor::zeros({C}, true));
    for (int s = 0; s < cfg.num_upsample_stages; ++s) {
        const std::string pre = "head.stage" + std::to_string(s);
        p.emplace(pre + ".w", Tensor::trunc_normal({C, C, 3, 3}, rng, 0.02, true));
        p.emplace(pre + ".b", Tensor::zeros({C}, true));
    }
    p.emplace("head.out.w", Tensor::trunc_normal({cfg.num_classes, C, 1, 1}, rng, 0.02, true));
    p.emplace("head.out.b", Tensor::zeros({cfg.num_classes}, true));
}

// tokens [n, L, enc_dim] without cls -> logits [n, num_classes, H, W]
inline Tensor segmentation_forward(const Tensor& tokens, ParamMap& p, const SegHeadConfig& cfg,
                                   int grid_side) {
    const std::int64_t n = tokens.dim(0), L = tokens.dim(1), D = tokens.dim(2);
    if (L != static_cast<std::int64_t>(grid_side) * grid_side)
        shape_error("segmentation_forward: token count " + std::to_string(L) +
                    " does not fill a " + std::to_string(grid_side) + "x" +
                    std::to_string(grid_side) + " grid");
    auto x = permute(reshape(tokens, {n, grid_side, grid_side, D}), {0, 3, 1, 2});
    x = add_channel_bias(conv2d(x, param(p, "head.in.w")), param(p, "head.in.b"));
    for (int s = 0; s < cfg.num_upsample_stages; ++s) {
        const std::string pre = "head.stage" + std::to_string(s);
        x = add_channel_bias(conv2d(x, param(p, pre + ".w"), 1, 1), param(p, pre + ".b"));
        x = upsample2x(relu(x));
    }
    return add_channel_bias(conv2d(x, param(p, "head.out.w")), param(p, "head.out.b"));
}

inline std::int64_t seg_head_param_count(const SegHeadConfig& cfg, int enc_dim) {
    const std::int64_t C = cfg.stage_channels;
    std::int64_t n = C * enc_dim + C;
    n += cfg.num_upsample_stages * (C * C * 9 + C);
    n += static_cast<std::int64_t>(cfg.num_classes) * C + cfg.num_classes;
    return n;
}

enum class TaskKind { Regression, Segmentation };
enum class InitMode { Scratch, Pretrained };

// Encoder plus one downstream head, fine-tuned end to end. The head RNG
// stream is independent of the encoder stream so scratch and pretrained arms
// share head initialization for a given seed.
class FinetuneModel {
public:
    FinetuneModel(MaeConfig cfg, TaskKind task, RegressionHeadConfig reg_cfg,
                  SegHeadConfig seg_cfg, InitMode mode, const std::string& checkpoint_path,
                  std::uint64_t seed)
        : encoder_(cfg, Rng(seed)), task_(task), reg_cfg_(reg_cfg), seg_cfg_(seg_cfg) {
        if (task == TaskKind::Segmentation) seg_cfg_.validate(cfg.grid_side(), cfg.image_size);
        Rng head_rng = Rng(seed).fork(100);
        if (task == TaskKind::Regression)
            init_regression_head(head_params_, reg_cfg_, cfg.num_patches(), cfg.enc_dim, head_rng);
        else
            init_seg_head(head_params_, seg_cfg_, cfg.enc_dim, head_rng);
        if (mode == InitMode::Pretrained) load_encoder(checkpoint_path);
    }

    MaeModel& encoder() { return encoder_; }
    ParamMap& head_params() { return head_params_; }
    TaskKind task() const { return task_; }

    // regression: [n]; segmentation: [n, K, H, W]
    Tensor forward(const Tensor& images) {
        auto latent = encoder_.encode_image(images);
        auto tokens = encoder_.config().use_cls_token
                          ? slice(latent, 1, 1, encoder_.config().num_patches())
                          : latent;
        if (task_ == TaskKind::Regression) return regression_forward(tokens, head_params_, reg_cfg_);
        return segmentation_forward(tokens, head_params_, seg_cfg_, encoder_.config().grid_side());
    }

    // encoder weights plus head weights; the reconstruction decoder is not
    // part of the fine-tuned parameter set
    ParamMap trainable_params() {
        ParamMap out;
        for (auto& [name, t] : encoder_.params())
            if (name.rfind("enc.", 0) == 0) out.emplace(name, t);
        for (auto& [name, t] : head_params_) out.emplace(name, t);
        return out;
    }

private:
    void load_encoder(const std::string& path) {
        auto ckpt = load_checkpoint(path);
        std::vector<std::string> problems;
        for (auto& [name, t] : encoder_.params()) {
            if (name.rfind("enc.", 0) != 0) continue;
            auto it = ckpt.find(name);
            if (it == ckpt.end()) {
                problems.push_back(name + " (missing from checkpoint)");
            } else if (it->second.shape() != t.shape()) {
                problems.push_back(name + " (checkpoint " + shape_str(it->second.shape()) +
                                   " vs model " + shape_str(t.shape()) + ")");
            } else {
                t.raw() = it->second.raw();
            }
        }
        if (!problems.empty()) {
            std::string msg = "pretrained attach failed for " + path + ":";
            for (const auto& p : problems) msg += "\n  " + p;
            throw std::runtime_error(msg);
        }
    }

    MaeModel encoder_;
    TaskKind task_;
    RegressionHeadConfig reg_cfg_;
    SegHeadConfig seg_cfg_;
    ParamMap head_params_;
};

}  // namespace sarmae
