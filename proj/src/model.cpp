#include "ubn/model.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <unordered_map>

#include "ubn/wavelet.hpp"

namespace ubn {

namespace {

struct StageDims {
    int in_ch;   // input channels of the stage
    int ch;      // stage (skip) channels
};

StageDims stage_dims(const ModelConfig& cfg, int stage) {
    StageDims d;
    d.ch = cfg.base_channels << stage;
    d.in_ch = stage == 0 ? 3 : (cfg.base_channels << stage);
    return d;
}

int bottleneck_channels(const ModelConfig& cfg) { return cfg.base_channels << cfg.stages; }

// Additive side branches (the LL-band fusion here, the gated projection in
// the decoder, the pyramid fusion and context projection elsewhere) start at
// zero so the fresh network is a plain conv chain with stable feature
// magnitudes; each branch grows from zero during training. The main-path
// convolutions draw he_normal.
EncoderStageParams enc_init(const StageDims& d, Rng* rng) {
    EncoderStageParams p;
    auto w = [&](const Shape& s, int fan) {
        return rng ? Tensor::he_normal(s, fan, *rng, true) : Tensor::zeros(s, true);
    };
    p.conv_a_w = w({d.ch, d.in_ch, 3, 3}, d.in_ch * 9);
    p.conv_a_b = Tensor::zeros({d.ch}, true);
    p.conv_b_w = w({d.ch, d.ch, 3, 3}, d.ch * 9);
    p.conv_b_b = Tensor::zeros({d.ch}, true);
    p.lf_proj_w = Tensor::zeros({d.ch, d.in_ch, 1, 1}, true);
    p.lf_proj_b = Tensor::zeros({d.ch}, true);
    p.down_w = w({2 * d.ch, d.ch, 3, 3}, d.ch * 9);
    p.down_b = Tensor::zeros({2 * d.ch}, true);
    return p;
}

DecoderStageParams dec_init(const StageDims& d, Rng* rng) {
    DecoderStageParams p;
    auto w = [&](const Shape& s, int fan) {
        return rng ? Tensor::he_normal(s, fan, *rng, true) : Tensor::zeros(s, true);
    };
    const int f = 2 * d.ch;           // feature channels arriving from below
    const int hf_ch = 3 * d.in_ch;    // stored detail-band channels
    p.up_w = w({d.ch, f, 3, 3}, f * 9);
    p.up_b = Tensor::zeros({d.ch}, true);
    p.hf_proj_w = w({d.ch, hf_ch, 1, 1}, hf_ch);
    p.hf_proj_b = Tensor::zeros({d.ch}, true);
    p.gate_w = w({d.ch, 2 * d.ch}, 2 * d.ch);
    p.gate_b = Tensor::zeros({d.ch}, true);
    p.fuse_w = Tensor::zeros({d.ch, 2 * d.ch, 1, 1}, true);
    p.fuse_b = Tensor::zeros({d.ch}, true);
    return p;
}

// Both heads start from their neutral outputs (M = 1/2, R = 0): training
// begins at the identity restoration instead of removing injected noise,
// which otherwise drives the gate into early saturation.
MaskHeadParams mask_head_init(int c, Rng* rng) {
    MaskHeadParams p;
    auto w = [&](const Shape& s, int fan) {
        return rng ? Tensor::he_normal(s, fan, *rng, true) : Tensor::zeros(s, true);
    };
    p.conv_w = w({c, c, 3, 3}, c * 9);
    p.conv_b = Tensor::zeros({c}, true);
    p.out_w = Tensor::zeros({1, c, 1, 1}, true);
    p.out_b = Tensor::zeros({1}, true);
    return p;
}

ResidualHeadParams residual_head_init(int c, int cg, Rng* rng) {
    ResidualHeadParams p;
    auto w = [&](const Shape& s, int fan) {
        return rng ? Tensor::he_normal(s, fan, *rng, true) : Tensor::zeros(s, true);
    };
    const int in_ch = c + cg;  // cg == 0 when the context branch is off
    p.conv_w = w({c, in_ch, 3, 3}, in_ch * 9);
    p.conv_b = Tensor::zeros({c}, true);
    p.out_w = Tensor::zeros({3, c, 3, 3}, true);
    p.out_b = Tensor::zeros({3}, true);
    return p;
}

ModelParams build_params(const ModelConfig& config, Rng* rng) {
    if (config.base_channels < 1 || config.context_channels < 1 || config.stages != 3)
        throw ContractError("ModelParams: base/context channels must be >= 1, stages fixed at 3");
    ModelParams p;
    p.config = config;
    for (int s = 0; s < config.stages; ++s) p.enc.push_back(enc_init(stage_dims(config, s), rng));
    if (config.use_saam) {
        if (rng)
            p.saam = SaamParams::init(bottleneck_channels(config), *rng);
        else
            p.saam = SaamParams::zeros(bottleneck_channels(config));
    }
    for (int s = 0; s < config.stages; ++s) p.dec.push_back(dec_init(stage_dims(config, s), rng));
    if (config.use_context) {
        if (rng)
            p.context = ContextParams::init(config.context_channels, *rng);
        else
            p.context = ContextParams::zeros(config.context_channels);
    }
    if (config.use_mask) p.mask_head = mask_head_init(config.base_channels, rng);
    p.residual_head = residual_head_init(
        config.base_channels, config.use_context ? config.context_channels : 0, rng);
    return p;
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
    Rng rng(seed);
    return build_params(config, &rng);
}

ModelParams ModelParams::zeros(const ModelConfig& config) { return build_params(config, nullptr); }

void ModelParams::visit(const std::function<void(const std::string&, Tensor&)>& fn) {
    for (std::size_t s = 0; s < enc.size(); ++s) {
        const std::string pre = "enc" + std::to_string(s) + ".";
        fn(pre + "conv_a.weight", enc[s].conv_a_w);
        fn(pre + "conv_a.bias", enc[s].conv_a_b);
        fn(pre + "conv_b.weight", enc[s].conv_b_w);
        fn(pre + "conv_b.bias", enc[s].conv_b_b);
        fn(pre + "lf_proj.weight", enc[s].lf_proj_w);
        fn(pre + "lf_proj.bias", enc[s].lf_proj_b);
        fn(pre + "down.weight", enc[s].down_w);
        fn(pre + "down.bias", enc[s].down_b);
    }
    if (saam) {
        fn("saam.branch1.weight", saam->branch1_w);
        fn("saam.branch1.bias", saam->branch1_b);
        fn("saam.branch2.weight", saam->branch2_w);
        fn("saam.branch2.bias", saam->branch2_b);
        fn("saam.mlp_hidden.weight", saam->mlp_hidden_w);
        fn("saam.mlp_hidden.bias", saam->mlp_hidden_b);
        fn("saam.mlp_out.weight", saam->mlp_out_w);
        fn("saam.mlp_out.bias", saam->mlp_out_b);
    }
    for (std::size_t s = 0; s < dec.size(); ++s) {
        const std::string pre = "dec" + std::to_string(s) + ".";
        fn(pre + "up.weight", dec[s].up_w);
        fn(pre + "up.bias", dec[s].up_b);
        fn(pre + "hf_proj.weight", dec[s].hf_proj_w);
        fn(pre + "hf_proj.bias", dec[s].hf_proj_b);
        fn(pre + "gate.weight", dec[s].gate_w);
        fn(pre + "gate.bias", dec[s].gate_b);
        fn(pre + "fuse.weight", dec[s].fuse_w);
        fn(pre + "fuse.bias", dec[s].fuse_b);
    }
    if (context) {
        fn("context.stem.weight", context->stem_w);
        fn("context.stem.bias", context->stem_b);
        fn("context.dw7.weight", context->dw7_w);
        fn("context.dw7.bias", context->dw7_b);
        fn("context.dw11.weight", context->dw11_w);
        fn("context.dw11.bias", context->dw11_b);
        fn("context.proj.weight", context->proj_w);
        fn("context.proj.bias", context->proj_b);
    }
    if (mask_head) {
        fn("mask_head.conv.weight", mask_head->conv_w);
        fn("mask_head.conv.bias", mask_head->conv_b);
        fn("mask_head.out.weight", mask_head->out_w);
        fn("mask_head.out.bias", mask_head->out_b);
    }
    fn("residual_head.conv.weight", residual_head.conv_w);
    fn("residual_head.conv.bias", residual_head.conv_b);
    fn("residual_head.out.weight", residual_head.out_w);
    fn("residual_head.out.bias", residual_head.out_b);
}

std::int64_t ModelParams::param_count() {
    std::int64_t total = 0;
    visit([&](const std::string&, Tensor& t) { total += t.numel(); });
    return total;
}

// ---------------------------------------------------------------------------
// stages and heads
// ---------------------------------------------------------------------------

EncoderStageOut encoder_stage(const Tensor& feat, const EncoderStageParams& params) {
    Tensor skip = relu(conv2d(relu(conv2d(feat, params.conv_a_w, params.conv_a_b, 1, 1)),
                              params.conv_b_w, params.conv_b_b, 1, 1));
    DwtBands bands = dwt_haar(feat);
    Tensor lf_up = bilinear_up_to(bands.lf, feat.extent(2), feat.extent(3));
    skip = add(skip, conv2d(lf_up, params.lf_proj_w, params.lf_proj_b, 1, 0));
    EncoderStageOut out;
    out.skip = skip;
    out.hf = bands.hf;
    out.down = conv2d(skip, params.down_w, params.down_b, 2, 1);
    return out;
}

Tensor decoder_stage(const Tensor& feat, const Tensor& skip, const Tensor& hf,
                     const DecoderStageParams& params) {
    if (skip.extent(2) != 2 * feat.extent(2) || skip.extent(3) != 2 * feat.extent(3))
        throw ShapeError("decoder_stage: skip extents must be 2x the feature extents");
    const int n = skip.extent(0), c = params.up_w.extent(0);
    Tensor up = relu(conv2d(bilinear_up_to(feat, skip.extent(2), skip.extent(3)), params.up_w,
                            params.up_b, 1, 1));
    // Detail bands live at half the skip extent; lift them first, as the
    // encoder does with the LL band.
    Tensor hf_up = bilinear_up_to(hf, skip.extent(2), skip.extent(3));
    Tensor fused_in =
        concat_channels(skip, conv2d(hf_up, params.hf_proj_w, params.hf_proj_b, 1, 0));
    Tensor pooled = reshape(global_avg_pool(fused_in), {n, 2 * c});
    Tensor gate = reshape(sigmoid(linear(pooled, params.gate_w, params.gate_b)), {n, c, 1, 1});
    Tensor proj = conv2d(fused_in, params.fuse_w, params.fuse_b, 1, 0);
    return add(up, mul(proj, gate));
}

Tensor predict_mask(const Tensor& f_d, const MaskHeadParams& params) {
    Tensor h = relu(conv2d(f_d, params.conv_w, params.conv_b, 1, 1));
    return sigmoid(conv2d(h, params.out_w, params.out_b, 1, 0));
}

Tensor predict_residual(const Tensor& f_d, const std::optional<Tensor>& f_g,
                        const ResidualHeadParams& params) {
    Tensor in = f_g ? concat_channels(f_d, *f_g) : f_d;
    if (in.extent(1) != params.conv_w.extent(1))
        throw ShapeError("predict_residual: head expects " +
                         std::to_string(params.conv_w.extent(1)) + " input channels, got " +
                         std::to_string(in.extent(1)));
    Tensor h = relu(conv2d(in, params.conv_w, params.conv_b, 1, 1));
    return conv2d(h, params.out_w, params.out_b, 1, 1);
}

Tensor compose_output(const Tensor& inp, const Tensor& mask, const Tensor& residual) {
    return add(inp, mul(residual, mask));
}

ForwardOutput forward(const Tensor& inp, ModelParams& params) {
    if (inp.rank() != 4 || inp.extent(1) != 3)
        throw ShapeError("forward: input must be [N,3,H,W]");
    if (inp.extent(2) % 32 != 0 || inp.extent(3) % 32 != 0)
        throw ShapeError("forward: spatial extents must be divisible by 32, got " +
                         shape_str(inp.shape()));
    const ModelConfig& cfg = params.config;
    std::vector<Tensor> skips, hfs;
    Tensor feat = inp;
    for (int s = 0; s < cfg.stages; ++s) {
        EncoderStageOut stage = encoder_stage(feat, params.enc[static_cast<std::size_t>(s)]);
        skips.push_back(stage.skip);
        hfs.push_back(stage.hf);
        feat = stage.down;
    }
    if (cfg.use_saam) feat = saam_forward(feat, *params.saam);
    for (int s = cfg.stages - 1; s >= 0; --s)
        feat = decoder_stage(feat, skips[static_cast<std::size_t>(s)],
                             hfs[static_cast<std::size_t>(s)],
                             params.dec[static_cast<std::size_t>(s)]);
    ForwardOutput out;
    std::optional<Tensor> f_g;
    if (cfg.use_context) f_g = context_forward(inp, *params.context);
    out.mask = cfg.use_mask ? predict_mask(feat, *params.mask_head)
                            : Tensor::constant({inp.extent(0), 1, inp.extent(2), inp.extent(3)},
                                               1.0);
    out.residual = predict_residual(feat, f_g, params.residual_head);
    out.restored = compose_output(inp, out.mask, out.residual);
    return out;
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[5] = {'U', 'B', 'N', 'D', '1'};

void put_u16(std::string& buf, std::uint16_t v) {
    buf.push_back(static_cast<char>(v & 0xff));
    buf.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& buf, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(buf, bits);
}

class Reader {
public:
    explicit Reader(const std::string& path) : in_(path, std::ios::binary) {
        if (!in_) throw IoError("cannot open checkpoint file: " + path);
    }
    void read(char* dst, std::size_t n) {
        in_.read(dst, static_cast<std::streamsize>(n));
        if (in_.gcount() != static_cast<std::streamsize>(n))
            throw IoError("truncated checkpoint file");
    }
    std::uint8_t u8() {
        char c;
        read(&c, 1);
        return static_cast<std::uint8_t>(c);
    }
    std::uint16_t u16() {
        unsigned char b[2];
        read(reinterpret_cast<char*>(b), 2);
        return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
    }
    std::uint32_t u32() {
        unsigned char b[4];
        read(reinterpret_cast<char*>(b), 4);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) |
               (static_cast<std::uint32_t>(b[3]) << 24);
    }
    float f32() {
        const std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }

private:
    std::ifstream in_;
};

}  // namespace

void save_params(ModelParams& params, const std::string& path) {
    std::string buf;
    buf.append(kMagic, 5);
    put_u32(buf, static_cast<std::uint32_t>(params.config.base_channels));
    put_u32(buf, static_cast<std::uint32_t>(params.config.context_channels));
    buf.push_back(params.config.use_mask ? 1 : 0);
    buf.push_back(params.config.use_saam ? 1 : 0);
    buf.push_back(params.config.use_context ? 1 : 0);
    std::uint32_t count = 0;
    params.visit([&](const std::string&, Tensor&) { ++count; });
    put_u32(buf, count);
    params.visit([&](const std::string& name, Tensor& t) {
        put_u16(buf, static_cast<std::uint16_t>(name.size()));
        buf.append(name);
        buf.push_back(static_cast<char>(t.rank()));
        for (int i = 0; i < t.rank(); ++i)
            put_u32(buf, static_cast<std::uint32_t>(t.extent(i)));
        const double* d = t.data();
        for (std::int64_t i = 0; i < t.numel(); ++i)
            put_f32(buf, static_cast<float>(d[i]));
    });
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint file: " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("failed writing checkpoint file: " + path);
}

ModelParams load_params(const std::string& path) {
    Reader r(path);
    char magic[5];
    r.read(magic, 5);
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("bad checkpoint magic");
    if (magic[4] != kMagic[4])
        throw IoError("checkpoint version mismatch");
    ModelConfig cfg;
    cfg.base_channels = static_cast<int>(r.u32());
    cfg.context_channels = static_cast<int>(r.u32());
    cfg.use_mask = r.u8() != 0;
    cfg.use_saam = r.u8() != 0;
    cfg.use_context = r.u8() != 0;
    if (cfg.base_channels < 1 || cfg.base_channels > 4096 || cfg.context_channels < 1 ||
        cfg.context_channels > 4096)
        throw IoError("checkpoint config block is implausible");

    ModelParams params = ModelParams::zeros(cfg);
    std::unordered_map<std::string, Tensor*> inventory;
    params.visit([&](const std::string& name, Tensor& t) { inventory[name] = &t; });

    const std::uint32_t count = r.u32();
    if (count != inventory.size())
        throw IoError("checkpoint parameter count " + std::to_string(count) +
                      " does not match config (" + std::to_string(inventory.size()) + ")");
    std::unordered_map<std::string, bool> seen;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = r.u16();
        std::string name(name_len, '\0');
        r.read(name.data(), name_len);
        auto it = inventory.find(name);
        if (it == inventory.end())
            throw IoError("unknown parameter name '" + name + "' in checkpoint");
        if (seen[name]) throw IoError("duplicate parameter '" + name + "' in checkpoint");
        seen[name] = true;
        const int rank = static_cast<int>(r.u8());
        if (rank < 1 || rank > 4) throw IoError("invalid rank for parameter '" + name + "'");
        Shape shape(static_cast<std::size_t>(rank));
        for (int a = 0; a < rank; ++a) shape[static_cast<std::size_t>(a)] = static_cast<int>(r.u32());
        Tensor& dst = *it->second;
        if (shape != dst.shape())
            throw IoError("shape mismatch for parameter '" + name + "': file has " +
                          shape_str(shape) + ", config expects " + shape_str(dst.shape()));
        double* d = dst.data();
        for (std::int64_t j = 0; j < dst.numel(); ++j) d[j] = static_cast<double>(r.f32());
    }
    return params;
}

}  // namespace ubn
