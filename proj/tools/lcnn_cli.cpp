#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include "lcnn/config.hpp"
#include "lcnn/error.hpp"
#include "lcnn/pipeline.hpp"
#include "lcnn/synth.hpp"

namespace {

struct Overrides {
    std::string config_file;
    std::vector<std::string> sets;
    std::string mode;
    std::string manifest;
    std::string work_dir;
    std::string output_dir;
    long seed = -1;
    bool quiet = false;
};

void add_common(CLI::App* cmd, Overrides& o) {
    cmd->add_option("-c,--config", o.config_file, "key = value settings file");
    cmd->add_option("-s,--set", o.sets, "override a setting, e.g. --set cnn.epochs=4");
    cmd->add_option("-m,--mode", o.mode, "baseline-softmax | cnn-svm | cnn-spatial-svm | cnn-contrast-svm | lcnn");
    cmd->add_option("--manifest", o.manifest, "dataset manifest CSV");
    cmd->add_option("--work-dir", o.work_dir, "cache directory");
    cmd->add_option("--output-dir", o.output_dir, "directory for maps and reports");
    cmd->add_option("--seed", o.seed, "random seed");
    cmd->add_flag("-q,--quiet", o.quiet, "suppress progress messages");
}

lcnn::PipelineConfig resolve(const Overrides& o) {
    lcnn::KeyValueConfig kv = o.config_file.empty() ? lcnn::KeyValueConfig{} : lcnn::KeyValueConfig::load(o.config_file);
    for (const auto& s : o.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw lcnn::Error("--set expects key=value, got '" + s + "'");
        kv.set(s.substr(0, eq), s.substr(eq + 1));
    }
    if (!o.mode.empty()) kv.set("mode", o.mode);
    if (!o.manifest.empty()) kv.set("manifest", o.manifest);
    if (!o.work_dir.empty()) kv.set("work_dir", o.work_dir);
    if (!o.output_dir.empty()) kv.set("output_dir", o.output_dir);
    if (o.seed >= 0) kv.set("seed", std::to_string(o.seed));
    if (o.quiet) kv.set("verbose", "false");
    return lcnn::pipeline_config(kv);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Salient object detection with region proposals, a CNN and low-level feature embedding"};
    app.require_subcommand(1);

    lcnn::SynthParams synth;
    std::string synth_dir = "data";
    auto* s = app.add_subcommand("synth", "generate a synthetic dataset with exact ground truth");
    s->add_option("-o,--out", synth_dir, "output directory");
    s->add_option("--train", synth.train, "training images")->check(CLI::NonNegativeNumber);
    s->add_option("--test", synth.test, "test images")->check(CLI::NonNegativeNumber);
    s->add_option("--width", synth.width, "image width")->check(CLI::Range(16, 4096));
    s->add_option("--height", synth.height, "image height")->check(CLI::Range(16, 4096));
    s->add_option("--seed", synth.seed, "random seed");

    Overrides o;
    std::vector<std::string> run_modes;
    struct Stage {
        const char* name;
        const char* help;
    };
    const Stage stages[] = {
        {"propose", "selective-search proposals and training labels"},
        {"train-cnn", "train the patch classifier network"},
        {"features", "low-level and fc7 features per proposal"},
        {"train-svm", "train the linear detector for the current mode"},
        {"detect", "write saliency maps for the test split"},
        {"evaluate", "write pr_curve.csv and report.csv for the test split"},
        {"run", "all stages; cached stages are reused"},
    };
    std::vector<CLI::App*> stage_cmds;
    for (const auto& st : stages) {
        auto* cmd = app.add_subcommand(st.name, st.help);
        add_common(cmd, o);
        if (std::string(st.name) == "run")
            cmd->add_option("--modes", run_modes, "modes to run in sequence ('all' for every mode)");
        stage_cmds.push_back(cmd);
    }

    CLI11_PARSE(app, argc, argv);

    try {
        if (s->parsed()) {
            if (synth.train + synth.test < 1) throw lcnn::Error("--train plus --test must be at least 1");
            lcnn::write_synthetic_dataset(synth, synth_dir);
            std::printf("wrote %d images to %s\n", synth.train + synth.test, synth_dir.c_str());
            return 0;
        }
        const lcnn::PipelineConfig cfg = resolve(o);
        const std::string name = app.get_subcommands().front()->get_name();
        if (name == "propose") lcnn::cmd_propose(cfg);
        else if (name == "train-cnn") lcnn::cmd_train_cnn(cfg);
        else if (name == "features") lcnn::cmd_features(cfg);
        else if (name == "train-svm") lcnn::cmd_train_svm(cfg);
        else if (name == "detect") lcnn::cmd_detect(cfg);
        else if (name == "evaluate") {
            const auto r = lcnn::cmd_evaluate(cfg);
            std::printf("%s F=%.4f MAE=%.4f\n", std::string(lcnn::to_string(cfg.mode)).c_str(), r.f_measure, r.mae);
        } else if (name == "run") {
            std::vector<lcnn::EmbeddingMode> modes;
            for (const auto& m : run_modes) {
                if (m == "all") modes.assign(lcnn::kAllModes.begin(), lcnn::kAllModes.end());
                else modes.push_back(lcnn::embedding_mode_from_string(m));
            }
            if (modes.empty()) modes.push_back(cfg.mode);
            for (auto m : modes) {
                lcnn::PipelineConfig c = cfg;
                c.mode = m;
                const auto r = lcnn::cmd_run(c);
                std::printf("%s F=%.4f MAE=%.4f\n", std::string(lcnn::to_string(m)).c_str(), r.f_measure, r.mae);
            }
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "lcnn: error: %s\n", e.what());
        return 1;
    }
    return 0;
}
