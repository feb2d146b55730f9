#include "ubn/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "ubn/metrics.hpp"

namespace ubn {

namespace {

template <typename S>
void adam_update(double* p, double* g, double* m, double* v, std::int64_t n, const AdamState& st) {
    const S b1 = static_cast<S>(st.beta1), b2 = static_cast<S>(st.beta2);
    const S lr = static_cast<S>(st.lr), eps = static_cast<S>(st.eps);
    const S c1 = S(1) - static_cast<S>(std::pow(st.beta1, static_cast<double>(st.t)));
    const S c2 = S(1) - static_cast<S>(std::pow(st.beta2, static_cast<double>(st.t)));
    for (std::int64_t i = 0; i < n; ++i) {
        const S gv = static_cast<S>(g[i]);
        const S mv = b1 * static_cast<S>(m[i]) + (S(1) - b1) * gv;
        const S vv = b2 * static_cast<S>(v[i]) + (S(1) - b2) * gv * gv;
        m[i] = static_cast<double>(mv);
        v[i] = static_cast<double>(vv);
        const S mhat = mv / c1;
        const S vhat = vv / c2;
        p[i] = static_cast<double>(static_cast<S>(p[i]) - lr * mhat / (std::sqrt(vhat) + eps));
        g[i] = 0.0;
    }
}

}  // namespace

void adam_step(ModelParams& params, AdamState& state) {
    std::vector<std::pair<std::string, Tensor>> slots;
    params.visit([&](const std::string& name, Tensor& t) { slots.emplace_back(name, t); });
    if (state.m.empty()) {
        state.m.resize(slots.size());
        state.v.resize(slots.size());
        for (std::size_t i = 0; i < slots.size(); ++i) {
            state.m[i].assign(static_cast<std::size_t>(slots[i].second.numel()), 0.0);
            state.v[i].assign(static_cast<std::size_t>(slots[i].second.numel()), 0.0);
        }
    }
    if (state.m.size() != slots.size())
        throw ContractError("adam_step: optimizer state does not match parameter inventory");
    for (auto& [name, t] : slots)
        if (t.requires_grad() && !t.has_grad())
            throw ContractError("adam_step: missing gradient for parameter '" + name + "'");
    ++state.t;
    for (std::size_t i = 0; i < slots.size(); ++i) {
        Tensor& t = slots[i].second;
        if (compute_precision() == Precision::f64)
            adam_update<double>(t.data(), t.ensure_grad(), state.m[i].data(),
                                state.v[i].data(), t.numel(), state);
        else
            adam_update<float>(t.data(), t.ensure_grad(), state.m[i].data(), state.v[i].data(),
                               t.numel(), state);
    }
}

namespace {

// Stacks per-sample [1,C,h,w] tensors into one [B,C,h,w] batch.
Tensor stack_batch(const std::vector<Tensor>& items) {
    const int c = items[0].extent(1), h = items[0].extent(2), w = items[0].extent(3);
    Tensor out = Tensor::zeros({static_cast<int>(items.size()), c, h, w});
    const std::int64_t stride = std::int64_t(c) * h * w;
    for (std::size_t i = 0; i < items.size(); ++i)
        std::copy_n(items[i].data(), stride, out.data() + std::int64_t(i) * stride);
    return out;
}

}  // namespace

TrainResult train_loop(const std::string& data_dir, const ModelConfig& config,
                       const TrainOptions& opt) {
    if (opt.steps < 0 || opt.batch < 1) throw ContractError("train_loop: bad steps/batch");
    if (opt.crop < 32 || opt.crop % 32 != 0)
        throw ContractError("train_loop: crop must be a positive multiple of 32");
    Dataset ds = load_dataset(data_dir);
    for (const LoadedPair& p : ds.pairs)
        if (p.degraded.extent(2) < opt.crop || p.degraded.extent(3) < opt.crop)
            throw ContractError("train_loop: crop exceeds dataset image extent");

    // Pseudo-masks once per pair, on the full images.
    std::vector<Tensor> masks;
    masks.reserve(ds.pairs.size());
    for (const LoadedPair& p : ds.pairs) masks.push_back(build_pseudo_mask(p.degraded, p.clean));

    TrainResult result;
    result.params = ModelParams::init(config, opt.seed);
    AdamState adam;
    adam.lr = opt.lr;
    PerceptualExtractor phi;
    Rng sched(opt.seed * 0x9E3779B97F4A7C15ULL + 1);

    std::ofstream log_out;
    if (!opt.log_path.empty()) {
        log_out.open(opt.log_path, std::ios::trunc);
        if (!log_out) throw IoError("cannot write training log: " + opt.log_path);
    }

    for (int step = 1; step <= opt.steps; ++step) {
        std::vector<Tensor> ins, gts, mgs;
        for (int b = 0; b < opt.batch; ++b) {
            const std::size_t idx =
                static_cast<std::size_t>(sched.below(ds.pairs.size()));
            const LoadedPair& p = ds.pairs[idx];
            const AugmentWindow w = draw_augment(sched, p.degraded.extent(2), opt.crop);
            ins.push_back(apply_window(p.degraded, w));
            gts.push_back(apply_window(p.clean, w));
            mgs.push_back(apply_window(masks[idx], w));
        }
        Tensor batch_in = stack_batch(ins);
        Tensor batch_gt = stack_batch(gts);
        Tensor batch_mg = stack_batch(mgs);

        Graph graph;
        LossTerms terms;
        {
            Recording rec(graph);
            ForwardOutput out = forward(batch_in, result.params);
            std::optional<Tensor> pred_mask, mgt;
            if (config.use_mask) {
                pred_mask = out.mask;
                mgt = batch_mg;
            }
            terms = total_loss(out.restored, batch_gt, pred_mask, mgt, opt.weights, phi);
        }
        graph.backward(terms.total);
        adam_step(result.params, adam);

        StepLog entry;
        entry.step = step;
        entry.lrec = terms.rec;
        entry.lssim = terms.ssim;
        entry.lgrad = terms.grad;
        entry.lperc = terms.perc;
        entry.lmask = terms.mask;
        entry.total = terms.total.item();
        result.log.push_back(entry);
        if (log_out) {
            nlohmann::json j;
            j["step"] = entry.step;
            j["lrec"] = entry.lrec;
            j["lssim"] = entry.lssim;
            j["lgrad"] = entry.lgrad;
            j["lperc"] = entry.lperc;
            j["lmask"] = entry.lmask;
            j["total"] = entry.total;
            log_out << j.dump() << "\n";
        }
    }
    return result;
}

EvalReport evaluate_split(ModelParams& params, const std::string& data_dir) {
    Dataset ds = load_dataset(data_dir);
    EvalReport report;
    report.skipped = ds.skipped;
    for (const LoadedPair& p : ds.pairs) {
        ForwardOutput out = forward(p.degraded, params);
        Tensor restored = out.restored;
        double* d = restored.data();
        for (std::int64_t i = 0; i < restored.numel(); ++i) d[i] = std::clamp(d[i], 0.0, 1.0);
        EvalEntry e;
        e.index = p.index;
        e.psnr = psnr(restored, p.clean);
        e.ssim = ssim_metric(restored, p.clean);
        e.baseline_psnr = psnr(p.degraded, p.clean);
        e.baseline_ssim = ssim_metric(p.degraded, p.clean);
        report.per_image.push_back(e);
    }
    for (const EvalEntry& e : report.per_image) {
        report.mean_psnr += e.psnr;
        report.mean_ssim += e.ssim;
        report.baseline_psnr += e.baseline_psnr;
        report.baseline_ssim += e.baseline_ssim;
    }
    const double n = static_cast<double>(report.per_image.size());
    report.mean_psnr /= n;
    report.mean_ssim /= n;
    report.baseline_psnr /= n;
    report.baseline_ssim /= n;
    return report;
}

}  // namespace ubn
