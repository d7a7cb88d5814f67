// Command-line front end: train / evaluate / gen-data / design-levels.

#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cmtkd/config.hpp"
#include "cmtkd/dataset.hpp"
#include "cmtkd/quantize.hpp"
#include "cmtkd/trainer.hpp"

namespace {

template <class T>
int run_train(const cmtkd::TrainConfig& cfg, std::uint64_t seed, const std::string& out_dir) {
    cmtkd::Experiment<T> exp(cfg, seed, out_dir);
    cmtkd::RunResult res = exp.run();
    std::printf("preset=%s seed=%llu steps=%d skipped=%d\n", cmtkd::preset_to_string(cfg.preset).c_str(),
                static_cast<unsigned long long>(seed), res.steps, res.skipped);
    std::printf("best: top1=%.4f top5=%.4f combined_top1=%.4f\n", res.best_top1, res.best_top5,
                res.best_combined_top1);
    std::printf("final: top1=%.4f top5=%.4f\n", res.final_top1, res.final_top5);
    std::printf("checkpoint: %s\n", res.checkpoint_path.c_str());
    return 0;
}

template <class T>
int run_evaluate(const cmtkd::Checkpoint& ck, const cmtkd::TrainConfig& cfg, const std::string& data_path) {
    cmtkd::Models<T> models = cmtkd::build_models<T>(cfg, 0);
    cmtkd::Normalizer nm;
    cmtkd::load_models_from_checkpoint(ck, cfg, models, nm);
    cmtkd::Dataset ds = cmtkd::load_dataset(data_path);
    cmtkd::SplitIndices split = cmtkd::split_dataset(ds);
    cmtkd::EvalMetrics em = cmtkd::evaluate_net(models.student, ds, nm, split.test);
    std::printf("student: top1=%.17g top5=%.17g\n", em.top1, em.top5);
    if (models.ensemble) {
        cmtkd::EvalMetrics cm = cmtkd::evaluate_ensemble(*models.ensemble, ds, nm, split.test);
        std::printf("combined_teacher: top1=%.17g top5=%.17g\n", cm.top1, cm.top5);
    }
    if (const auto* a = ck.find("recorded/top1_student"))
        std::printf("recorded: top1=%.17g top5=%.17g\n", a->f64[0], ck.find("recorded/top5_student")->f64[0]);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Collaborative multi-teacher distillation for low bit-width CNNs"};
    app.require_subcommand(1);

    // train
    std::string config_path, out_dir = "runs/out";
    std::uint64_t seed = 1;
    CLI::App* train = app.add_subcommand("train", "train a model per config file");
    train->add_option("--config", config_path, "JSON config file")->required();
    train->add_option("--seed", seed, "master seed");
    train->add_option("--out", out_dir, "output directory");

    // evaluate
    std::string ckpt_path, data_path;
    CLI::App* eval = app.add_subcommand("evaluate", "evaluate a saved checkpoint");
    eval->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
    eval->add_option("--data", data_path, "dataset file")->required();

    // gen-data
    std::string gen_out = "data/desk.cmtd", size_str = "16x16";
    int classes = 10, per_class = 313, channels = 1;
    std::uint64_t gen_seed = 7;
    double noise = 0.22, label_noise = 0.0;
    CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic pattern dataset");
    gen->add_option("--out", gen_out, "output path")->required();
    gen->add_option("--classes", classes, "number of classes (2-10)");
    gen->add_option("--per-class", per_class, "images per class");
    gen->add_option("--size", size_str, "HxW, e.g. 16x16");
    gen->add_option("--channels", channels, "image channels");
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--noise", noise, "additive noise sigma");
    gen->add_option("--label-noise", label_noise, "fraction of train labels re-drawn");

    // design-levels
    int bits = 2;
    bool half_wave = false;
    CLI::App* design = app.add_subcommand("design-levels", "print optimal uniform Gaussian levels");
    design->add_option("--bits", bits, "bit-width (1-8)")->required();
    design->add_flag("--half-wave", half_wave, "half-wave (activation) table");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) {
            cmtkd::TrainConfig cfg = cmtkd::load_config(config_path);
            if (cfg.precision == "f64") return run_train<double>(cfg, seed, out_dir);
            return run_train<float>(cfg, seed, out_dir);
        }
        if (*eval) {
            cmtkd::Checkpoint ck = cmtkd::load_checkpoint(ckpt_path);
            cmtkd::TrainConfig cfg = cmtkd::parse_config_json(nlohmann::json::parse(ck.config_echo));
            if (cfg.precision == "f64") return run_evaluate<double>(ck, cfg, data_path);
            return run_evaluate<float>(ck, cfg, data_path);
        }
        if (*gen) {
            int h = 16, w = 16;
            if (std::sscanf(size_str.c_str(), "%dx%d", &h, &w) != 2)
                throw cmtkd::ValueError("--size must look like 16x16");
            cmtkd::Dataset ds = cmtkd::make_synthetic(classes, per_class, h, w, channels, gen_seed, noise, label_noise);
            if (gen_out.find('/') != std::string::npos)
                std::filesystem::create_directories(std::filesystem::path(gen_out).parent_path());
            cmtkd::save_dataset(ds, gen_out);
            std::printf("wrote %zu images (%d classes, %dx%dx%d) to %s\n", ds.count(), classes, channels, h,
                        w, gen_out.c_str());
            return 0;
        }
        if (*design) {
            const auto qd = cmtkd::design_uniform_gaussian(bits, half_wave);
            std::printf("bits=%d %s step=%.10f mse=%.10f\n", bits, half_wave ? "half-wave" : "full-wave",
                        qd.step, qd.mse);
            std::printf("levels:");
            for (double l : qd.levels) std::printf(" %.10f", l);
            std::printf("\n");
            return 0;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
