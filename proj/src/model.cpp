#include "cmta/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "cmta/errors.hpp"
#include "cmta/rng.hpp"

namespace cmta {

namespace {

using nlohmann::json;

Tensor uniform_init(Rng& rng, const Shape& shape, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    std::vector<double> values(n);
    for (double& v : values) v = rng.uniform(-bound, bound);
    return Tensor::from(shape, std::move(values), true);
}

Tensor normal_init(Rng& rng, const Shape& shape, double stddev) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    std::vector<double> values(n);
    for (double& v : values) v = rng.normal(0.0, stddev);
    return Tensor::from(shape, std::move(values), true);
}

Tensor zeros_param(const Shape& shape) {
    Tensor t = Tensor::zeros(shape);
    t.set_requires_grad(true);
    return t;
}

Tensor ones_param(const Shape& shape) {
    Tensor t = Tensor::full(shape, 1.0);
    t.set_requires_grad(true);
    return t;
}

MsaParams init_msa(Rng& rng, std::size_t d, std::size_t heads) {
    const std::size_t d_head = d / heads;
    MsaParams msa;
    for (std::size_t h = 0; h < heads; ++h) {
        msa.q_proj.push_back(uniform_init(rng, {d, d_head}, d));
        msa.k_proj.push_back(uniform_init(rng, {d, d_head}, d));
        msa.v_proj.push_back(uniform_init(rng, {d, d_head}, d));
    }
    msa.out_proj = uniform_init(rng, {d, d}, d);
    msa.ln_gain = ones_param({d});
    msa.ln_bias = zeros_param({d});
    return msa;
}

PpegParams init_ppeg(Rng& rng, std::size_t d) {
    PpegParams p;
    p.k3 = uniform_init(rng, {d, 3, 3}, 9);
    p.k5 = uniform_init(rng, {d, 5, 5}, 25);
    p.k7 = uniform_init(rng, {d, 7, 7}, 49);
    return p;
}

void collect_msa(std::vector<NamedParam>& out, const std::string& prefix, const MsaParams& msa) {
    for (std::size_t h = 0; h < msa.q_proj.size(); ++h) {
        out.push_back({prefix + ".q_proj." + std::to_string(h), msa.q_proj[h]});
        out.push_back({prefix + ".k_proj." + std::to_string(h), msa.k_proj[h]});
        out.push_back({prefix + ".v_proj." + std::to_string(h), msa.v_proj[h]});
    }
    out.push_back({prefix + ".out_proj", msa.out_proj});
    out.push_back({prefix + ".ln_gain", msa.ln_gain});
    out.push_back({prefix + ".ln_bias", msa.ln_bias});
}

void collect_ppeg(std::vector<NamedParam>& out, const std::string& prefix, const PpegParams& p) {
    out.push_back({prefix + ".k3", p.k3});
    out.push_back({prefix + ".k5", p.k5});
    out.push_back({prefix + ".k7", p.k7});
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_row_broadcast(matmul(x, w), b);
}

// MSA(LN(x)) + x, switching to the Nystrom approximation when the config asks
// for landmarks and the sequence is longer than the landmark count.
Tensor msa_block(const Tensor& tokens, const MsaParams& msa, const ModelConfig& config) {
    AttentionMode mode = AttentionMode::Exact;
    std::size_t landmarks = 0;
    if (config.landmarks > 0) {
        mode = AttentionMode::Nystrom;
        landmarks = std::min(config.landmarks, tokens.rows());
    }
    return add(multi_head_self_attention(tokens, msa, mode, landmarks, config.pinv_iters),
               tokens);
}

}  // namespace

// ---- config ------------------------------------------------------------------

void ModelConfig::validate() const {
    if (dim == 0 || heads == 0 || dim % heads != 0) {
        throw ContractError("model config: dim must be a positive multiple of heads");
    }
    if (bins < 2) throw ContractError("model config: need at least 2 bins");
    if (alpha < 0.0) throw ContractError("model config: alpha must be non-negative");
    if (genomics_widths.empty()) throw ContractError("model config: no genomic groups");
    if (pathology_width == 0) throw ContractError("model config: pathology width must be positive");
    if (mlp_hidden == 0) throw ContractError("model config: mlp_hidden must be positive");
}

std::string ModelConfig::to_canonical_json() const {
    json obj;
    obj["alignment_metric"] = to_string(alignment_metric);
    obj["alpha"] = alpha;
    obj["bins"] = bins;
    obj["detach_targets"] = detach_targets;
    obj["dim"] = dim;
    obj["genomics_widths"] = genomics_widths;
    obj["heads"] = heads;
    obj["landmarks"] = landmarks;
    obj["mlp_hidden"] = mlp_hidden;
    obj["pathology_width"] = pathology_width;
    obj["pinv_iters"] = pinv_iters;
    obj["use_alignment"] = use_alignment;
    obj["use_cross_modal"] = use_cross_modal;
    obj["use_ppeg"] = use_ppeg;
    return obj.dump();  // nlohmann orders keys alphabetically
}

ModelConfig ModelConfig::from_json_text(const std::string& text) {
    json obj = json::parse(text);
    ModelConfig c;
    c.alignment_metric = alignment_metric_from_string(obj.at("alignment_metric"));
    c.alpha = obj.at("alpha");
    c.bins = obj.at("bins");
    c.detach_targets = obj.at("detach_targets");
    c.dim = obj.at("dim");
    c.genomics_widths = obj.at("genomics_widths").get<std::vector<std::size_t>>();
    c.heads = obj.at("heads");
    c.landmarks = obj.at("landmarks");
    c.mlp_hidden = obj.at("mlp_hidden");
    c.pathology_width = obj.at("pathology_width");
    c.pinv_iters = obj.at("pinv_iters");
    c.use_alignment = obj.at("use_alignment");
    c.use_cross_modal = obj.at("use_cross_modal");
    c.use_ppeg = obj.at("use_ppeg");
    c.validate();
    return c;
}

// ---- parameters -----------------------------------------------------------------

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    const std::size_t d = config.dim;

    ModelParams p;
    p.pathology_proj_w = uniform_init(rng, {config.pathology_width, d}, config.pathology_width);
    p.pathology_proj_b = zeros_param({d});
    for (std::size_t w : config.genomics_widths) {
        p.genomics_proj_w.push_back(uniform_init(rng, {w, d}, w));
        p.genomics_proj_b.push_back(zeros_param({d}));
    }
    p.class_p0 = normal_init(rng, {1, d}, 0.02);
    p.class_g0 = normal_init(rng, {1, d}, 0.02);
    p.class_rho0 = normal_init(rng, {1, d}, 0.02);
    p.class_xi0 = normal_init(rng, {1, d}, 0.02);

    p.path_enc1 = init_msa(rng, d, config.heads);
    p.path_enc2 = init_msa(rng, d, config.heads);
    p.path_ppeg = init_ppeg(rng, d);
    p.gen_enc1 = init_msa(rng, d, config.heads);
    p.gen_enc2 = init_msa(rng, d, config.heads);

    p.cross.u = uniform_init(rng, {d, d}, d);
    p.cross.v = uniform_init(rng, {d, d}, d);
    p.cross.w_p = uniform_init(rng, {d, d}, d);
    p.cross.w_g = uniform_init(rng, {d, d}, d);

    p.path_dec1 = init_msa(rng, d, config.heads);
    p.path_dec2 = init_msa(rng, d, config.heads);
    p.gen_dec1 = init_msa(rng, d, config.heads);
    p.gen_dec2 = init_msa(rng, d, config.heads);
    p.gen_dec_ppeg = init_ppeg(rng, d);

    p.fusion_w1 = uniform_init(rng, {2 * d, config.mlp_hidden}, 2 * d);
    p.fusion_b1 = zeros_param({config.mlp_hidden});
    p.fusion_w2 = uniform_init(rng, {config.mlp_hidden, config.bins}, config.mlp_hidden);
    p.fusion_b2 = zeros_param({config.bins});
    return p;
}

std::vector<NamedParam> ModelParams::named() const {
    std::vector<NamedParam> out;
    out.push_back({"pathology_proj.weight", pathology_proj_w});
    out.push_back({"pathology_proj.bias", pathology_proj_b});
    for (std::size_t k = 0; k < genomics_proj_w.size(); ++k) {
        out.push_back({"genomics_proj." + std::to_string(k) + ".weight", genomics_proj_w[k]});
        out.push_back({"genomics_proj." + std::to_string(k) + ".bias", genomics_proj_b[k]});
    }
    out.push_back({"class_token.p0", class_p0});
    out.push_back({"class_token.g0", class_g0});
    out.push_back({"class_token.rho0", class_rho0});
    out.push_back({"class_token.xi0", class_xi0});
    collect_msa(out, "path_encoder.block1", path_enc1);
    collect_msa(out, "path_encoder.block2", path_enc2);
    collect_ppeg(out, "path_encoder.ppeg", path_ppeg);
    collect_msa(out, "gen_encoder.block1", gen_enc1);
    collect_msa(out, "gen_encoder.block2", gen_enc2);
    out.push_back({"cross.u", cross.u});
    out.push_back({"cross.v", cross.v});
    out.push_back({"cross.w_p", cross.w_p});
    out.push_back({"cross.w_g", cross.w_g});
    collect_msa(out, "path_decoder.block1", path_dec1);
    collect_msa(out, "path_decoder.block2", path_dec2);
    collect_msa(out, "gen_decoder.block1", gen_dec1);
    collect_msa(out, "gen_decoder.block2", gen_dec2);
    collect_ppeg(out, "gen_decoder.ppeg", gen_dec_ppeg);
    out.push_back({"fusion.w1", fusion_w1});
    out.push_back({"fusion.b1", fusion_b1});
    out.push_back({"fusion.w2", fusion_w2});
    out.push_back({"fusion.b2", fusion_b2});
    return out;
}

// ---- encoders / decoders -----------------------------------------------------------

EncoderOutput encode_pathology(const Tensor& patches, const ModelParams& params,
                               const ModelConfig& config) {
    if (patches.rank() != 2 || patches.cols() != config.pathology_width) {
        throw ShapeError("encode_pathology: expected Mx" + std::to_string(config.pathology_width) +
                         " patches, got " + shape_str(patches.shape()));
    }
    const std::size_t m = patches.rows();
    Tensor embedded = linear(patches, params.pathology_proj_w, params.pathology_proj_b);
    Tensor tokens = concat(params.class_p0, embedded, 0);  // (M+1)×d

    tokens = msa_block(tokens, params.path_enc1, config);
    if (config.use_ppeg) {
        auto [cls, feats] = ppeg(slice(tokens, 0, 0, 1), slice(tokens, 0, 1, m),
                                 params.path_ppeg);
        tokens = concat(cls, feats, 0);
    }
    tokens = msa_block(tokens, params.path_enc2, config);

    return {slice(tokens, 0, 0, 1), slice(tokens, 0, 1, m)};
}

EncoderOutput encode_genomics(const std::vector<Tensor>& groups, const ModelParams& params,
                              const ModelConfig& config) {
    if (groups.empty()) throw ShapeError("encode_genomics: empty genomic group set");
    if (groups.size() != config.genomics_widths.size()) {
        throw ShapeError("encode_genomics: expected " +
                         std::to_string(config.genomics_widths.size()) + " groups, got " +
                         std::to_string(groups.size()));
    }
    Tensor stacked;
    for (std::size_t k = 0; k < groups.size(); ++k) {
        if (groups[k].rank() != 2 || groups[k].rows() != 1 ||
            groups[k].cols() != config.genomics_widths[k]) {
            throw ShapeError("encode_genomics: group " + std::to_string(k) + " must be 1x" +
                             std::to_string(config.genomics_widths[k]) + ", got " +
                             shape_str(groups[k].shape()));
        }
        Tensor row = linear(groups[k], params.genomics_proj_w[k], params.genomics_proj_b[k]);
        stacked = k == 0 ? row : concat(stacked, row, 0);
    }
    const std::size_t kk = groups.size();
    Tensor tokens = concat(params.class_g0, stacked, 0);  // (K+1)×d
    tokens = msa_block(tokens, params.gen_enc1, config);
    tokens = msa_block(tokens, params.gen_enc2, config);
    return {slice(tokens, 0, 0, 1), slice(tokens, 0, 1, kk)};
}

Tensor decode_pathology(const Tensor& p_related, const ModelParams& params,
                        const ModelConfig& config) {
    Tensor tokens = concat(params.class_rho0, p_related, 0);
    tokens = msa_block(tokens, params.path_dec1, config);
    tokens = msa_block(tokens, params.path_dec2, config);
    return slice(tokens, 0, 0, 1);
}

Tensor decode_genomics(const Tensor& g_related, const ModelParams& params,
                       const ModelConfig& config) {
    const std::size_t m = g_related.rows();
    Tensor tokens = concat(params.class_xi0, g_related, 0);
    tokens = msa_block(tokens, params.gen_dec1, config);
    if (config.use_ppeg) {
        auto [cls, feats] = ppeg(slice(tokens, 0, 0, 1), slice(tokens, 0, 1, m),
                                 params.gen_dec_ppeg);
        tokens = concat(cls, feats, 0);
    }
    tokens = msa_block(tokens, params.gen_dec2, config);
    return slice(tokens, 0, 0, 1);
}

// ---- full forward -------------------------------------------------------------------

std::pair<ForwardArtifacts, SurvivalOutput> forward(const PatientRecord& record,
                                                    const ModelParams& params,
                                                    const ModelConfig& config) {
    record.validate();
    ForwardArtifacts art;

    EncoderOutput path = encode_pathology(record.pathology, params, config);
    EncoderOutput gen = encode_genomics(record.genomics, params, config);
    art.p = path.class_row;
    art.g = gen.class_row;
    art.inst_p = path.instance_rows;
    art.inst_g = gen.instance_rows;

    const std::size_t m = path.instance_rows.rows();
    const std::size_t k = gen.instance_rows.rows();

    if (config.use_cross_modal) {
        CrossModalOutput cm = cross_modal_attention(path.instance_rows, gen.instance_rows,
                                                    params.cross);
        art.h_p = cm.h_p;
        art.h_g = cm.h_g;
        art.p_related = cm.p_related;
        art.g_related = cm.g_related;
    } else {
        // Uniform maps isolate the attention module while keeping the
        // translation path (and W_p/W_g) intact.
        art.h_p = Tensor::full({k, m}, 1.0 / static_cast<double>(m));
        art.h_g = Tensor::full({m, k}, 1.0 / static_cast<double>(k));
        art.p_related = matmul(art.h_p, matmul(path.instance_rows, params.cross.w_p));
        art.g_related = matmul(art.h_g, matmul(gen.instance_rows, params.cross.w_g));
    }

    art.g_hat = decode_pathology(art.p_related, params, config);
    art.p_hat = decode_genomics(art.g_related, params, config);

    Tensor fused = concat(scale(add(art.p, art.p_hat), 0.5),
                          scale(add(art.g, art.g_hat), 0.5), 1);  // 1×2d
    Tensor hidden = gelu(linear(fused, params.fusion_w1, params.fusion_b1));
    Tensor logits = linear(hidden, params.fusion_w2, params.fusion_b2);
    art.hazards = sigmoid(logits);  // 1×B

    return {art, make_survival_output(art.hazards.values())};
}

// ---- checkpoints ----------------------------------------------------------------------

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char buf[4] = {static_cast<unsigned char>(v & 0xff),
                            static_cast<unsigned char>((v >> 8) & 0xff),
                            static_cast<unsigned char>((v >> 16) & 0xff),
                            static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(buf), 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint32_t read_u32(std::istream& in, std::size_t offset) {
    unsigned char buf[4];
    in.read(reinterpret_cast<char*>(buf), 4);
    if (in.gcount() != 4) throw FormatError("truncated checkpoint", offset);
    return static_cast<std::uint32_t>(buf[0]) | (static_cast<std::uint32_t>(buf[1]) << 8) |
           (static_cast<std::uint32_t>(buf[2]) << 16) |
           (static_cast<std::uint32_t>(buf[3]) << 24);
}

std::uint64_t read_u64(std::istream& in, std::size_t offset) {
    unsigned char buf[8];
    in.read(reinterpret_cast<char*>(buf), 8);
    if (in.gcount() != 8) throw FormatError("truncated checkpoint", offset);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const ModelParams& params) {
    const std::string tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IntegrityError("cannot open " + tmp + " for writing");
        out.write("CMTA", 4);
        write_u32(out, kCheckpointVersion);
        const std::string cfg = config.to_canonical_json();
        write_u32(out, static_cast<std::uint32_t>(cfg.size()));
        out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));

        const auto entries = params.named();
        write_u32(out, static_cast<std::uint32_t>(entries.size()));
        for (const NamedParam& entry : entries) {
            write_u32(out, static_cast<std::uint32_t>(entry.name.size()));
            out.write(entry.name.data(), static_cast<std::streamsize>(entry.name.size()));
            write_u32(out, static_cast<std::uint32_t>(entry.tensor.rank()));
            for (std::size_t d : entry.tensor.shape()) write_u64(out, d);
            for (double v : entry.tensor.values()) {
                std::uint64_t bits;
                std::memcpy(&bits, &v, 8);
                write_u64(out, bits);
            }
        }
        out.flush();
        if (!out) throw IntegrityError("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

std::pair<ModelConfig, ModelParams> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint " + path.string(), 0);

    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, "CMTA", 4) != 0) {
        throw FormatError("bad magic in " + path.string() + ", expected CMTA", 0);
    }
    const std::uint32_t version = read_u32(in, 4);
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
    }
    const std::uint32_t cfg_len = read_u32(in, 8);
    std::string cfg_text(cfg_len, '\0');
    in.read(cfg_text.data(), cfg_len);
    if (in.gcount() != static_cast<std::streamsize>(cfg_len)) {
        throw FormatError("truncated checkpoint config", 12);
    }
    ModelConfig config = ModelConfig::from_json_text(cfg_text);
    ModelParams params = ModelParams::init(config, 0);

    std::unordered_map<std::string, Tensor> by_name;
    for (const NamedParam& entry : params.named()) by_name.emplace(entry.name, entry.tensor);

    const std::size_t header_end = 12 + cfg_len;
    const std::uint32_t count = read_u32(in, header_end);
    if (count != by_name.size()) {
        throw FormatError("checkpoint parameter count " + std::to_string(count) +
                              " does not match config-derived count " +
                              std::to_string(by_name.size()),
                          header_end);
    }
    std::size_t offset = header_end + 4;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = read_u32(in, offset);
        offset += 4;
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (in.gcount() != static_cast<std::streamsize>(name_len)) {
            throw FormatError("truncated parameter name", offset);
        }
        offset += name_len;
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw FormatError("unknown parameter '" + name + "' in checkpoint", offset);
        }
        Tensor target = it->second;
        const std::uint32_t rank = read_u32(in, offset);
        offset += 4;
        Shape shape(rank);
        for (std::uint32_t r = 0; r < rank; ++r) {
            shape[r] = static_cast<std::size_t>(read_u64(in, offset));
            offset += 8;
        }
        if (shape != target.shape()) {
            throw ShapeError("checkpoint parameter '" + name + "' has shape " + shape_str(shape) +
                             ", expected " + shape_str(target.shape()));
        }
        auto& values = target.mutable_values();
        for (double& v : values) {
            const std::uint64_t bits = read_u64(in, offset);
            offset += 8;
            std::memcpy(&v, &bits, 8);
        }
        by_name.erase(it);
    }
    if (!by_name.empty()) {
        throw FormatError("checkpoint is missing parameter '" + by_name.begin()->first + "'",
                          offset);
    }
    return {config, params};
}

}  // namespace cmta
