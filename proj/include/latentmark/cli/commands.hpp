#pragma once

#include <optional>
#include <string>
#include <vector>

#include "latentmark/io/config.hpp"

namespace latentmark::cli {

// Fully-resolved run configuration: every hyperparameter of the pipeline with
// its default, validated against the known-key schema. A resolved copy is
// written into every run directory.
struct RunConfig {
    io::ConfigDoc doc;

    static RunConfig load(const std::string& path);
    static RunConfig defaults();
    static const std::vector<std::string>& allowed_keys();

    std::string resolved_text() const { return doc.dump(); }
    std::string config_hash() const;
    std::string output_root() const;  // [output].root, overridable by LATENTMARK_OUT
};

// out/<run-id>/{checkpoints,images,reports}; run-id = timestamp + hash prefix.
struct RunPaths {
    std::string run_dir, checkpoints, images, reports;
};
RunPaths make_run_dir(const RunConfig& cfg, const std::string& command);

void write_manifest(const RunPaths& paths, const std::string& command, const RunConfig& cfg,
                    const std::vector<std::pair<std::string, std::string>>& artifacts,
                    double wall_seconds, const std::vector<uint64_t>& seeds);

struct GenerateOptions {
    std::string adapter_path;
    std::string base_path;
    std::string autoencoder_path;
    std::string message_hex;
    int count = 16;
    std::string sampler = "ddim";
    int steps = 20;
    double guidance = 3.0;
    double eta = 0.0;
    int style = 0;
    uint64_t seed = 1;
};

struct VerifyOptions {
    std::string codec_path;
    std::vector<std::string> inputs;  // files or directories
    std::string expected_hex;         // empty = classification only
    double target_fpr = 1e-6;
};

struct AttackOptions {
    std::string adapter_path;
    std::string base_path;         // needed by sweeps and merge
    std::string autoencoder_path;  // needed by sweeps
    std::string codec_path;        // needed by sweeps
    std::optional<double> prune_ratio;
    std::string quant_format;
    std::vector<std::string> merge_with;  // adapter files
    double merge_weight = 1.0;
    std::string sweep;          // "prune" | "quantize" | "merge" | "distort"
    std::string distort_spec;   // for image-mode distortion
    std::string images_dir;     // for image-mode distortion
    std::string message_hex;    // payload for sweeps
    int probe_count = 100;
    uint64_t seed = 7;
};

int cmd_synthesize_dataset(const RunConfig& cfg, const std::string& out_dir, int count,
                           int styles, uint64_t seed);
int cmd_train_base(const RunConfig& cfg, const std::string& autoencoder_in);
int cmd_pretrain_codec(const RunConfig& cfg, const std::string& autoencoder_in,
                       int epochs_override);
int cmd_train_adapter(const RunConfig& cfg, const std::string& codec_path,
                      const std::string& base_path, const std::string& autoencoder_path,
                      const std::string& scope_override, int rank_override,
                      const std::string& resume_dir);
int cmd_generate(const RunConfig& cfg, const GenerateOptions& opt);
int cmd_verify(const RunConfig& cfg, const VerifyOptions& opt);
int cmd_attack(const RunConfig& cfg, const AttackOptions& opt);
int cmd_report(const std::string& summary_path, const std::string& gate_path);

}  // namespace latentmark::cli
