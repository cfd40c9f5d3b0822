#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "sarmae/datapipe.hpp"
#include "sarmae/heads.hpp"
#include "sarmae/mae.hpp"

namespace sarmae {

// training diverged; maps to the CLI's numeric-failure exit code
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class TaskId { Pretrain, Modisveg, Esawc };
std::string task_name(TaskId t);
TaskId task_from_name(const std::string& name);

// Epoch schedule: pretrain 75; downstream epochs depend on the label fraction.
int epoch_schedule(TaskId task, double label_fraction);

struct RunConfig {
    TaskId task = TaskId::Pretrain;
    double label_fraction = 1.0;
    InitMode init_mode = InitMode::Scratch;
    int epochs = 5;
    int batch_size = 8;
    std::uint64_t seed = 0;
    double lr = 1e-4;
    double weight_decay = 0.0;
};

struct EpochPoint {
    int epoch = 0;  // 1-based; nothing is logged before the first epoch
    double train_loss = 0;
    double val_metric = 0;
};

struct RunReport {
    std::string task;
    std::vector<EpochPoint> history;
    int best_epoch = 0;
    double best_val_metric = 0;
    double final_test_metric = std::numeric_limits<double>::quiet_NaN();
    double wall_clock_sec = 0;
    std::string checkpoint_path;

    void save_jsonl(const std::string& path) const;
};

// ---------------------------------------------------------------------------
// metrics (f64 accumulation throughout)

struct MiouResult {
    std::vector<double> per_class;
    std::vector<bool> present;  // nonzero union
    double mean = 0;
};

class ConfusionMatrix {
public:
    explicit ConfusionMatrix(int num_classes = kNumLandCoverClasses);
    void add(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth);
    void add_one(int pred, int truth);
    // IoU per class from globally accumulated counts; classes with zero
    // union are excluded from the mean
    MiouResult miou() const;
    int num_classes() const { return k_; }

private:
    int k_;
    std::vector<std::int64_t> counts_;  // pred-major [pred][truth]
};

MiouResult miou(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth,
                int num_classes = kNumLandCoverClasses);

double rmse_metric(const std::vector<double>& preds, const std::vector<double>& targets);

struct OlsFit {
    double slope = 0, intercept = 0, r2 = 0;
};
OlsFit ols_fit(const std::vector<double>& x, const std::vector<double>& y);
void write_ols_plot_data(const std::string& path, const std::vector<double>& x,
                         const std::vector<double>& y, const OlsFit& fit);

// ---------------------------------------------------------------------------
// data plumbing

struct ChannelStats {
    std::array<double, 12> mean{}, stddev{};
};

ChannelStats compute_channel_stats(const std::vector<TileRecord>& tiles);
Tensor batch_images(const std::vector<const TileRecord*>& tiles, const ChannelStats& stats);

// ---------------------------------------------------------------------------
// training loops

RunReport pretrain_mae(const std::vector<TileRecord>& train, const std::vector<TileRecord>& val,
                       const MaeConfig& mcfg, const RunConfig& rcfg, const std::string& out_dir);

RunReport finetune(TaskId task, const std::vector<TileRecord>& train,
                   const std::vector<TileRecord>& val, const std::vector<TileRecord>& test,
                   const MaeConfig& mcfg, const RegressionHeadConfig& reg_cfg,
                   const SegHeadConfig& seg_cfg, const RunConfig& rcfg,
                   const std::string& pretrain_checkpoint, const std::string& out_dir);

// metric on a tile set: RMSE (veg %) for regression, mIoU for segmentation
double evaluate_model(FinetuneModel& model, const std::vector<TileRecord>& tiles,
                      const ChannelStats& stats, int batch_size = 8);

void load_finetune_checkpoint(FinetuneModel& model, const std::string& path);
ChannelStats stats_from_checkpoint(const std::string& path);

// Appendix-style reconstruction grid: one row per tile, panels
// [masked | reconstruction | original], first channel, written as PGM.
void emit_reconstruction_grid(MaeModel& model, const std::vector<TileRecord>& tiles,
                              const ChannelStats& stats, std::uint64_t seed,
                              const std::string& path);

// ---------------------------------------------------------------------------
// reporting

struct RunCell {
    std::string region;
    double fraction = 1.0;  // of labels
    bool pretrained = false;
    double metric = 0;
    bool present = true;
};

struct AblationTable {
    std::string text;
    std::string csv;
    std::vector<std::string> warnings;
};

// fractions x {scratch, pretrained} x regions grid; best cell per region
// marked (both on ties, with a warning), missing cells rendered as em-dash
AblationTable ablation_report(const std::vector<RunCell>& cells, bool higher_better);

}  // namespace sarmae
