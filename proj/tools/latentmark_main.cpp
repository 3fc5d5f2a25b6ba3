#include <CLI11.hpp>

#include <iostream>

#include "latentmark/cli/commands.hpp"

using namespace latentmark;

int main(int argc, char** argv) {
    CLI::App app{"latentmark: watermark-entangled LoRA training for a toy latent diffusion model"};
    app.require_subcommand(1);

    std::string config_path;

    auto add_config = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "run configuration file (TOML)");
    };
    auto load_config = [&]() {
        return config_path.empty() ? cli::RunConfig::defaults()
                                   : cli::RunConfig::load(config_path);
    };

    // synthesize-dataset
    auto* synth = app.add_subcommand("synthesize-dataset", "generate the procedural toy corpus");
    add_config(synth);
    std::string synth_out;
    int synth_count = 256, synth_styles = 4;
    uint64_t synth_seed = 77;
    synth->add_option("--out", synth_out, "output directory (default: run images dir)");
    synth->add_option("--count", synth_count, "number of images");
    synth->add_option("--styles", synth_styles, "number of styles (1-4)");
    synth->add_option("--seed", synth_seed, "generator seed");

    // train-base
    auto* base = app.add_subcommand("train-base", "train the latent autoencoder and denoiser");
    add_config(base);
    std::string base_ae;
    base->add_option("--autoencoder", base_ae, "reuse an existing autoencoder checkpoint");

    // pretrain-codec
    auto* pre = app.add_subcommand("pretrain-codec", "stage-1 watermark codec pretraining");
    add_config(pre);
    std::string pre_ae;
    int pre_epochs = -1;
    pre->add_option("--autoencoder", pre_ae, "autoencoder checkpoint (trained on demand if absent)");
    pre->add_option("--epochs", pre_epochs, "override codec.epochs");

    // train-adapter
    auto* tad = app.add_subcommand("train-adapter", "stage-2 joint adapter/mapper training");
    add_config(tad);
    std::string tad_codec, tad_base, tad_ae, tad_scope, tad_resume;
    int tad_rank = -1;
    tad->add_option("--codec", tad_codec, "codec checkpoint")->required();
    tad->add_option("--base", tad_base, "denoiser checkpoint")->required();
    tad->add_option("--autoencoder", tad_ae, "autoencoder checkpoint")->required();
    tad->add_option("--scope", tad_scope, "fine-tune scope override");
    tad->add_option("--rank", tad_rank, "adapter rank override");
    tad->add_option("--resume", tad_resume, "checkpoint directory to resume from");

    // generate
    auto* gen = app.add_subcommand("generate", "sample watermarked images");
    add_config(gen);
    cli::GenerateOptions gopt;
    gen->add_option("--adapter", gopt.adapter_path)->required();
    gen->add_option("--base", gopt.base_path)->required();
    gen->add_option("--autoencoder", gopt.autoencoder_path)->required();
    gen->add_option("--message", gopt.message_hex, "payload as hex (MSB first)")->required();
    gen->add_option("--count", gopt.count);
    gen->add_option("--sampler", gopt.sampler, "ddim or ddpm");
    gen->add_option("--steps", gopt.steps);
    gen->add_option("--guidance", gopt.guidance);
    gen->add_option("--eta", gopt.eta);
    gen->add_option("--style", gopt.style);
    gen->add_option("--seed", gopt.seed);

    // verify
    auto* ver = app.add_subcommand("verify", "decode and classify images");
    add_config(ver);
    cli::VerifyOptions vopt;
    ver->add_option("--codec", vopt.codec_path)->required();
    ver->add_option("--images", vopt.inputs, "image files or directories")->required();
    ver->add_option("--expected", vopt.expected_hex, "expected payload hex");
    ver->add_option("--fpr", vopt.target_fpr, "detection false-positive rate");

    // attack
    auto* att = app.add_subcommand("attack", "model- or image-level attacks and sweeps");
    add_config(att);
    cli::AttackOptions aopt;
    double prune_ratio = -1;
    att->add_option("--adapter", aopt.adapter_path);
    att->add_option("--base", aopt.base_path);
    att->add_option("--autoencoder", aopt.autoencoder_path);
    att->add_option("--codec", aopt.codec_path);
    att->add_option("--prune", prune_ratio, "prune ratio in [0,1]");
    att->add_option("--quantize", aopt.quant_format, "fp8_e4m3 | bf16 | int8 | int4");
    att->add_option("--merge-with", aopt.merge_with, "adapter files to merge in");
    att->add_option("--weight", aopt.merge_weight, "mix weight for merged adapters");
    att->add_option("--sweep", aopt.sweep, "prune | quantize | merge | distort");
    att->add_option("--distort", aopt.distort_spec, "single distortion, e.g. jpeg:80");
    att->add_option("--images", aopt.images_dir, "image directory for --distort");
    att->add_option("--message", aopt.message_hex, "payload hex for sweeps");
    att->add_option("--probe-count", aopt.probe_count);
    att->add_option("--seed", aopt.seed);

    // report
    auto* rep = app.add_subcommand("report", "summarize results and check gates");
    std::string rep_summary, rep_gate;
    rep->add_option("--summary", rep_summary, "summary JSON")->required();
    rep->add_option("--gate", rep_gate, "gate definition JSON");

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed())
            return cli::cmd_synthesize_dataset(load_config(), synth_out, synth_count,
                                               synth_styles, synth_seed);
        if (base->parsed()) return cli::cmd_train_base(load_config(), base_ae);
        if (pre->parsed()) return cli::cmd_pretrain_codec(load_config(), pre_ae, pre_epochs);
        if (tad->parsed())
            return cli::cmd_train_adapter(load_config(), tad_codec, tad_base, tad_ae, tad_scope,
                                          tad_rank, tad_resume);
        if (gen->parsed()) return cli::cmd_generate(load_config(), gopt);
        if (ver->parsed()) return cli::cmd_verify(load_config(), vopt);
        if (att->parsed()) {
            if (prune_ratio >= 0) aopt.prune_ratio = prune_ratio;
            return cli::cmd_attack(load_config(), aopt);
        }
        if (rep->parsed()) return cli::cmd_report(rep_summary, rep_gate);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
