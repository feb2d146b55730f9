#pragma once

#include <functional>
#include <optional>
#include <string>

#include "ubn/context.hpp"
#include "ubn/saam.hpp"
#include "ubn/tensor.hpp"

namespace ubn {

/// Network configuration. Ablation switches select which components exist;
/// input extents must be divisible by 32 (three halvings in the encoder
/// times the factor-4 bottleneck pyramid).
struct ModelConfig {
    int base_channels = 16;
    int stages = 3;  // fixed
    int context_channels = 16;
    bool use_mask = true;
    bool use_saam = true;
    bool use_context = true;
};

struct EncoderStageParams {
    Tensor conv_a_w, conv_a_b;    // 3x3 in->c
    Tensor conv_b_w, conv_b_b;    // 3x3 c->c
    Tensor lf_proj_w, lf_proj_b;  // 1x1 in->c, fuses the upsampled LL band
    Tensor down_w, down_b;        // 3x3 stride 2, c->2c
};

struct DecoderStageParams {
    Tensor up_w, up_b;            // 3x3 after bilinear upsample, f->c
    Tensor hf_proj_w, hf_proj_b;  // 1x1 on the stored detail bands
    Tensor gate_w, gate_b;        // linear 2c->c, channel gate
    Tensor fuse_w, fuse_b;        // 1x1 2c->c projection
};

struct MaskHeadParams {
    Tensor conv_w, conv_b;  // 3x3 c->c
    Tensor out_w, out_b;    // 1x1 c->1
};

struct ResidualHeadParams {
    Tensor conv_w, conv_b;  // 3x3 (c [+cg]) -> c
    Tensor out_w, out_b;    // 3x3 c->3
};

/// All trainable state, with a fixed visitation order that defines both the
/// checkpoint layout and the optimizer slot order.
struct ModelParams {
    ModelConfig config;
    std::vector<EncoderStageParams> enc;  // index 0 is the outermost stage
    std::optional<SaamParams> saam;
    std::vector<DecoderStageParams> dec;  // index 0 pairs with enc[0]
    std::optional<ContextParams> context;
    std::optional<MaskHeadParams> mask_head;
    ResidualHeadParams residual_head;

    static ModelParams init(const ModelConfig& config, std::uint64_t seed);
    static ModelParams zeros(const ModelConfig& config);

    void visit(const std::function<void(const std::string&, Tensor&)>& fn);
    std::int64_t param_count();
};

struct ForwardOutput {
    Tensor restored;  // [N,3,H,W]
    Tensor mask;      // [N,1,H,W], constant 1 when the mask head is disabled
    Tensor residual;  // [N,3,H,W]
};

struct EncoderStageOut {
    Tensor down;  // [N,2c,H/2,W/2]
    Tensor skip;  // [N,c,H,W]
    Tensor hf;    // detail bands of the stage input, kept for the decoder
};

EncoderStageOut encoder_stage(const Tensor& feat, const EncoderStageParams& params);
Tensor decoder_stage(const Tensor& feat, const Tensor& skip, const Tensor& hf,
                     const DecoderStageParams& params);
Tensor predict_mask(const Tensor& f_d, const MaskHeadParams& params);
Tensor predict_residual(const Tensor& f_d, const std::optional<Tensor>& f_g,
                        const ResidualHeadParams& params);
/// restored = inp + mask * residual (mask broadcast over channels).
Tensor compose_output(const Tensor& inp, const Tensor& mask, const Tensor& residual);

ForwardOutput forward(const Tensor& inp, ModelParams& params);

/// Checkpoint: magic "UBND1", config block, u32 tensor count, then per tensor
/// u16 name length + name, u8 rank, u32 extents, raw little-endian f32 data.
void save_params(ModelParams& params, const std::string& path);
ModelParams load_params(const std::string& path);

}  // namespace ubn
