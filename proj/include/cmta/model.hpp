#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "cmta/attention.hpp"
#include "cmta/data.hpp"
#include "cmta/survival.hpp"
#include "cmta/tensor.hpp"

namespace cmta {

struct ModelConfig {
    std::size_t dim = 64;
    std::size_t heads = 8;
    std::size_t landmarks = 8;  // 0 disables the Nystrom approximation
    std::size_t pinv_iters = 6;
    std::size_t bins = 4;
    std::size_t pathology_width = 1024;
    std::vector<std::size_t> genomics_widths = {64, 64, 64, 64, 64, 64};
    std::size_t mlp_hidden = 64;
    bool use_cross_modal = true;
    bool use_alignment = true;
    bool detach_targets = true;
    bool use_ppeg = true;
    AlignmentMetric alignment_metric = AlignmentMetric::L1;
    double alpha = 1.0;

    void validate() const;
    std::string to_canonical_json() const;
    static ModelConfig from_json_text(const std::string& text);
};

struct NamedParam {
    std::string name;
    Tensor tensor;
};

// Every learnable tensor of the network. All tensors are requires_grad leaves;
// named() exposes them in a fixed order for the optimizer and checkpoints.
struct ModelParams {
    Tensor pathology_proj_w, pathology_proj_b;
    std::vector<Tensor> genomics_proj_w, genomics_proj_b;
    Tensor class_p0, class_g0, class_rho0, class_xi0;
    MsaParams path_enc1, path_enc2;
    PpegParams path_ppeg;
    MsaParams gen_enc1, gen_enc2;
    CrossModalParams cross;
    MsaParams path_dec1, path_dec2;  // translates P-related tokens, no PPEG
    MsaParams gen_dec1, gen_dec2;
    PpegParams gen_dec_ppeg;
    Tensor fusion_w1, fusion_b1, fusion_w2, fusion_b2;

    static ModelParams init(const ModelConfig& config, std::uint64_t seed);
    std::vector<NamedParam> named() const;
};

// Forward-pass products kept for loss construction and inspection. p/g are the
// encoder class rows, p_hat/g_hat the decoder class rows; hazards stays
// attached to the graph.
struct ForwardArtifacts {
    Tensor p, g, p_hat, g_hat;  // 1×d each
    Tensor h_p, h_g;            // K×M and M×K attention maps
    Tensor inst_p, inst_g;      // encoder instance tokens
    Tensor p_related, g_related;
    Tensor hazards;  // 1×B
};

struct EncoderOutput {
    Tensor class_row;       // 1×d
    Tensor instance_rows;   // n×d
};

EncoderOutput encode_pathology(const Tensor& patches, const ModelParams& params,
                               const ModelConfig& config);
EncoderOutput encode_genomics(const std::vector<Tensor>& groups, const ModelParams& params,
                              const ModelConfig& config);
Tensor decode_pathology(const Tensor& p_related, const ModelParams& params,
                        const ModelConfig& config);
Tensor decode_genomics(const Tensor& g_related, const ModelParams& params,
                       const ModelConfig& config);

std::pair<ForwardArtifacts, SurvivalOutput> forward(const PatientRecord& record,
                                                    const ModelParams& params,
                                                    const ModelConfig& config);

// Checkpoints: magic "CMTA", u32 version, canonical-JSON config, then named
// float64 parameter blocks; round trips are bitwise exact.
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const ModelParams& params);
std::pair<ModelConfig, ModelParams> load_checkpoint(const std::filesystem::path& path);

}  // namespace cmta
