#pragma once

#include <string>
#include <vector>

#include "ubn/data.hpp"
#include "ubn/losses.hpp"
#include "ubn/model.hpp"

namespace ubn {

/// Adam moment buffers, one slot per parameter in ModelParams visit order.
struct AdamState {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long t = 0;
    std::vector<std::vector<double>> m, v;
};

/// One bias-corrected update; gradients are zeroed afterwards so a stale
/// gradient can never leak into the next step. Throws ContractError naming
/// any trainable parameter whose gradient was never populated.
void adam_step(ModelParams& params, AdamState& state);

struct StepLog {
    int step = 0;
    double lrec = 0, lssim = 0, lgrad = 0, lperc = 0, lmask = 0, total = 0;
};

struct TrainOptions {
    int steps = 300;
    int batch = 4;
    int crop = 64;
    double lr = 1e-4;
    std::uint64_t seed = 1;
    LossWeights weights;
    std::string log_path;  // newline-delimited JSON when non-empty
};

struct TrainResult {
    ModelParams params;
    std::vector<StepLog> log;
};

/// Deterministic for a given seed: initialization, sample order and
/// augmentation all derive from it. Pseudo-masks are built once per pair on
/// the full images and cropped/flipped with the pair.
TrainResult train_loop(const std::string& data_dir, const ModelConfig& config,
                       const TrainOptions& opt);

struct EvalEntry {
    int index = 0;
    double psnr = 0, ssim = 0, baseline_psnr = 0, baseline_ssim = 0;
};

struct EvalReport {
    double mean_psnr = 0, mean_ssim = 0;
    double baseline_psnr = 0, baseline_ssim = 0;  // input vs ground truth
    int skipped = 0;
    std::vector<EvalEntry> per_image;
};

/// Full-resolution inference over a dataset directory; metrics are computed
/// on outputs clamped to the displayable range.
EvalReport evaluate_split(ModelParams& params, const std::string& data_dir);

}  // namespace ubn
