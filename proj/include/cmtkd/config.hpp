#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmtkd/distill.hpp"
#include "cmtkd/network.hpp"
#include "cmtkd/optim.hpp"
#include "cmtkd/quantize.hpp"

namespace cmtkd {

enum class Preset {
    Single,
    KdFp,
    AverageTeacher,
    Cmtkd,
    CmtkdNoAtt,
    CmtkdNoMl,
    CombinedTeacherEval,
};

inline Preset preset_from_string(const std::string& s) {
    if (s == "single") return Preset::Single;
    if (s == "kd_fp") return Preset::KdFp;
    if (s == "average_teacher") return Preset::AverageTeacher;
    if (s == "cmtkd") return Preset::Cmtkd;
    if (s == "cmtkd_no_att") return Preset::CmtkdNoAtt;
    if (s == "cmtkd_no_ml") return Preset::CmtkdNoMl;
    if (s == "combined_teacher_eval") return Preset::CombinedTeacherEval;
    throw ValueError("unknown preset: " + s);
}

inline std::string preset_to_string(Preset p) {
    switch (p) {
        case Preset::Single: return "single";
        case Preset::KdFp: return "kd_fp";
        case Preset::AverageTeacher: return "average_teacher";
        case Preset::Cmtkd: return "cmtkd";
        case Preset::CmtkdNoAtt: return "cmtkd_no_att";
        case Preset::CmtkdNoMl: return "cmtkd_no_ml";
        case Preset::CombinedTeacherEval: return "combined_teacher_eval";
    }
    return "?";
}

inline bool preset_is_collaborative(Preset p) {
    return p == Preset::Cmtkd || p == Preset::CmtkdNoAtt || p == Preset::CmtkdNoMl ||
           p == Preset::CombinedTeacherEval;
}

struct LossWeights {
    double alpha = 1.0;
    double beta = 0.5;
    double gamma = 100.0;  // 100 with attention loss, 1 with fitnet
    double temperature = 4.0;
};

struct TrainConfig {
    Preset preset = Preset::Cmtkd;
    std::vector<int> teacher_bits = {4, 6, 8};
    int student_bits = 2;  // 0 = full precision
    QuantScheme quantizer = QuantScheme::Hwgq;
    FeatKind feat_loss = FeatKind::Attention;
    LossWeights weights;
    OptimConfig optim;
    ArchSpec arch;
    std::string data_path;
    std::string precision = "f32";  // f32 | f64
    bool augment = true;

    std::string echo;  // raw config text for checkpoints and reports
};

inline TrainConfig parse_config_json(const nlohmann::json& j) {
    TrainConfig cfg;
    if (j.contains("preset")) cfg.preset = preset_from_string(j.at("preset").get<std::string>());
    if (j.contains("teacher_bits")) cfg.teacher_bits = j.at("teacher_bits").get<std::vector<int>>();
    if (j.contains("student_bits")) cfg.student_bits = j.at("student_bits").get<int>();
    if (j.contains("quantizer")) {
        const std::string q = j.at("quantizer").get<std::string>();
        if (q == "hwgq") cfg.quantizer = QuantScheme::Hwgq;
        else if (q == "lsq") cfg.quantizer = QuantScheme::Lsq;
        else throw ValueError("config: quantizer must be hwgq or lsq");
    }
    bool gamma_given = false;
    if (j.contains("feat_loss")) {
        const std::string f = j.at("feat_loss").get<std::string>();
        if (f == "attention") cfg.feat_loss = FeatKind::Attention;
        else if (f == "fitnet") cfg.feat_loss = FeatKind::FitNet;
        else throw ValueError("config: feat_loss must be attention or fitnet");
    }
    if (j.contains("alpha")) cfg.weights.alpha = j.at("alpha").get<double>();
    if (j.contains("beta")) cfg.weights.beta = j.at("beta").get<double>();
    if (j.contains("gamma")) {
        cfg.weights.gamma = j.at("gamma").get<double>();
        gamma_given = true;
    }
    if (j.contains("temperature")) cfg.weights.temperature = j.at("temperature").get<double>();
    if (!gamma_given) cfg.weights.gamma = (cfg.feat_loss == FeatKind::Attention) ? 100.0 : 1.0;
    if (j.contains("epochs")) cfg.optim.epochs = j.at("epochs").get<int>();
    if (j.contains("batch_size")) cfg.optim.batch_size = j.at("batch_size").get<int>();
    if (j.contains("base_lr")) cfg.optim.base_lr = j.at("base_lr").get<double>();
    if (j.contains("momentum")) cfg.optim.momentum = j.at("momentum").get<double>();
    if (j.contains("schedule")) {
        const std::string s = j.at("schedule").get<std::string>();
        if (s == "step") cfg.optim.schedule = LrSchedule::Step;
        else if (s == "cosine") cfg.optim.schedule = LrSchedule::Cosine;
        else throw ValueError("config: schedule must be step or cosine");
    }
    if (j.contains("milestones")) cfg.optim.milestones = j.at("milestones").get<std::vector<int>>();
    if (j.contains("fusion_indices")) cfg.arch.fusion_indices = j.at("fusion_indices").get<std::vector<int>>();
    if (j.contains("arch")) {
        const auto& a = j.at("arch");
        if (a.contains("input")) {
            const auto in = a.at("input").get<std::vector<int>>();
            if (in.size() != 3) throw ValueError("config: arch.input must be [C,H,W]");
            cfg.arch.in_channels = in[0];
            cfg.arch.in_h = in[1];
            cfg.arch.in_w = in[2];
        }
        if (a.contains("channels")) cfg.arch.block_channels = a.at("channels").get<std::vector<int>>();
        if (a.contains("convs_per_block")) cfg.arch.convs_per_block = a.at("convs_per_block").get<int>();
        if (a.contains("kernel")) cfg.arch.kernel = a.at("kernel").get<int>();
        if (a.contains("pool")) cfg.arch.pool = a.at("pool").get<std::string>();
        if (a.contains("classes")) cfg.arch.num_classes = a.at("classes").get<int>();
    }
    if (j.contains("data_path")) cfg.data_path = j.at("data_path").get<std::string>();
    if (j.contains("precision")) cfg.precision = j.at("precision").get<std::string>();
    if (cfg.precision != "f32" && cfg.precision != "f64")
        throw ValueError("config: precision must be f32 or f64");
    if (j.contains("augment")) cfg.augment = j.at("augment").get<bool>();
    if (cfg.student_bits < 0 || cfg.student_bits > 8) throw ValueError("config: student_bits must be in [0,8]");
    for (int b : cfg.teacher_bits)
        if (b < 0 || b > 8) throw ValueError("config: teacher bits must be in [0,8]");
    cfg.arch.validate();
    cfg.echo = j.dump(2);
    return cfg;
}

inline TrainConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ValueError("load_config: cannot open " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const std::exception& e) {
        throw ValueError(std::string("load_config: parse error: ") + e.what());
    }
    return parse_config_json(j);
}

}  // namespace cmtkd
