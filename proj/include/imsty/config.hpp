#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "imsty/data.hpp"
#include "imsty/mean_teacher.hpp"

// Flat JSON run configuration, dataset provisioning from it, and the run
// manifest. Unknown keys are rejected so typos fail loudly (exit code 2 at
// the CLI layer).

namespace imsty {

constexpr const char* kArtifactVersion = "0.1.0";

struct DataConfig {
    std::string kind = "synth_digits";  // synth_digits | synth_keypoints | idx
    int classes = 10;
    int joints = 4;
    std::size_t image_size = 32;
    std::size_t train_count = 608;
    std::size_t eval_count = 256;
    std::uint64_t seed = 7;
    ShiftSpec shift{true, 0.2, 0.3, 1.0, 0.0, 99};
    std::string idx_images;
    std::string idx_labels;
};

struct RunConfig {
    Task task = Task::classification;
    Method method = Method::imsty;
    std::uint64_t seed = 42;
    std::string out_dir = "runs/out";
    TrainConfig train{};
    DataConfig data{};
    bool augment_given = false;  // whether aug_* keys appeared (else task default)
};

namespace detail {

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

inline void config_fail(const std::string& field, const std::string& why) {
    throw ConfigError("config field '" + field + "': " + why);
}

template <typename T>
T get_field(const nlohmann::json& j, const std::string& key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        config_fail(key, "has the wrong type");
    }
    return fallback;
}

}  // namespace detail

inline Task parse_task(const std::string& s) {
    if (s == "classification") return Task::classification;
    if (s == "pose") return Task::pose;
    detail::config_fail("task", "must be 'classification' or 'pose', got '" + s + "'");
    return Task::classification;
}

inline Method parse_method(const std::string& s) {
    if (s == "source_only") return Method::source_only;
    if (s == "mean_teacher_no_style") return Method::mean_teacher_no_style;
    if (s == "imsty") return Method::imsty;
    detail::config_fail("method", "must be source_only | mean_teacher_no_style | imsty, got '" + s + "'");
    return Method::imsty;
}

inline RunConfig parse_run_config(const nlohmann::json& raw) {
    using detail::config_fail;
    using detail::get_field;
    // A run manifest embeds the config under "config"; accept both layouts.
    const nlohmann::json& j = raw.contains("config") ? raw.at("config") : raw;
    static const std::vector<std::string> known = {
        "task", "method", "seed", "out_dir", "lambda_unsup", "alpha_mode", "alpha_fixed",
        "percentile_p", "ema_decay", "lr", "lr_decay_epochs", "lr_decay_factor", "total_epochs",
        "pretrain_epochs", "batch_size", "stat_scope", "stylize_eps", "stylize_stop_stats_grad",
        "beta_collect", "keep_ratio", "teacher_source_stats", "soft_pseudo_labels", "heatmap_sigma",
        "pck_threshold", "model_width", "aug_rotation_deg", "aug_shear_deg", "aug_translate_frac",
        "aug_scale_min", "aug_scale_max", "aug_contrast", "data_kind", "data_classes", "data_joints",
        "data_image_size", "data_train_count", "data_eval_count", "data_seed", "idx_images",
        "idx_labels", "shift_invert", "shift_noise_sigma", "shift_texture_amp", "shift_contrast",
        "shift_brightness", "shift_seed"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
            config_fail(it.key(), "unknown key");
        }
    }
    RunConfig rc;
    rc.task = parse_task(get_field<std::string>(j, "task", "classification"));
    rc.method = parse_method(get_field<std::string>(j, "method", "imsty"));
    rc.seed = get_field<std::uint64_t>(j, "seed", 42);
    rc.out_dir = get_field<std::string>(j, "out_dir", "runs/out");

    TrainConfig& t = rc.train;
    t.seed = rc.seed;
    t.lambda_unsup = get_field<double>(j, "lambda_unsup", 1.0);
    const std::string am = get_field<std::string>(j, "alpha_mode", "uniform01");
    if (am == "uniform01") {
        t.alpha_policy.mode = AlphaPolicy::Mode::uniform01;
    } else if (am == "fixed") {
        t.alpha_policy.mode = AlphaPolicy::Mode::fixed;
    } else {
        config_fail("alpha_mode", "must be 'uniform01' or 'fixed', got '" + am + "'");
    }
    t.alpha_policy.fixed_value = get_field<double>(j, "alpha_fixed", 0.0);
    if (t.alpha_policy.fixed_value < 0.0 || t.alpha_policy.fixed_value > 1.0) {
        config_fail("alpha_fixed", "must lie in [0, 1]");
    }
    t.percentile_p = get_field<double>(j, "percentile_p", 50.0);
    t.ema_decay = get_field<double>(j, "ema_decay", 0.999);
    t.lr = get_field<double>(j, "lr", 1e-4);
    t.lr_decay_epochs = get_field<std::vector<int>>(j, "lr_decay_epochs", {20, 26});
    t.lr_decay_factor = get_field<double>(j, "lr_decay_factor", 0.1);
    t.total_epochs = get_field<int>(j, "total_epochs", 30);
    t.pretrain_epochs = get_field<int>(j, "pretrain_epochs", 10);
    t.batch_size = get_field<int>(j, "batch_size", 32);
    const std::string scope = get_field<std::string>(j, "stat_scope", "minibatch");
    if (scope == "minibatch") {
        t.stat_scope = StatScope::minibatch;
    } else if (scope == "per_instance") {
        t.stat_scope = StatScope::per_instance;
    } else {
        config_fail("stat_scope", "must be 'minibatch' or 'per_instance', got '" + scope + "'");
    }
    t.stylize_eps = get_field<double>(j, "stylize_eps", 1e-5);
    t.stylize_stop_stats_grad = get_field<bool>(j, "stylize_stop_stats_grad", false);
    const std::string bc = get_field<std::string>(j, "beta_collect", "both");
    if (bc == "both") {
        t.beta_collect = TrainConfig::BetaCollect::both;
    } else if (bc == "target_only") {
        t.beta_collect = TrainConfig::BetaCollect::target_only;
    } else {
        config_fail("beta_collect", "must be 'both' or 'target_only', got '" + bc + "'");
    }
    t.keep_ratio = get_field<double>(j, "keep_ratio", 0.5);
    const std::string ts = get_field<std::string>(j, "teacher_source_stats", "student");
    if (ts == "student") {
        t.teacher_source_stats = TrainConfig::TeacherSourceStats::student;
    } else if (ts == "teacher") {
        t.teacher_source_stats = TrainConfig::TeacherSourceStats::teacher;
    } else {
        config_fail("teacher_source_stats", "must be 'student' or 'teacher', got '" + ts + "'");
    }
    t.soft_pseudo_labels = get_field<bool>(j, "soft_pseudo_labels", false);
    t.heatmap_sigma = get_field<double>(j, "heatmap_sigma", 2.0);
    t.pck_threshold = get_field<double>(j, "pck_threshold", 0.05);
    t.model_width = get_field<int>(j, "model_width", 32);

    rc.augment_given = j.contains("aug_rotation_deg") || j.contains("aug_shear_deg") ||
                       j.contains("aug_translate_frac") || j.contains("aug_scale_min") ||
                       j.contains("aug_scale_max") || j.contains("aug_contrast");
    AugmentSpec base = rc.task == Task::classification ? AugmentSpec::digits_default()
                                                       : AugmentSpec::pose_default();
    t.augment.rotation_deg = get_field<double>(j, "aug_rotation_deg", base.rotation_deg);
    t.augment.shear_deg = get_field<double>(j, "aug_shear_deg", base.shear_deg);
    t.augment.translate_frac = get_field<double>(j, "aug_translate_frac", base.translate_frac);
    t.augment.scale_min = get_field<double>(j, "aug_scale_min", base.scale_min);
    t.augment.scale_max = get_field<double>(j, "aug_scale_max", base.scale_max);
    t.augment.contrast = get_field<double>(j, "aug_contrast", base.contrast);
    if (t.augment.scale_min <= 0.0 || t.augment.scale_min > t.augment.scale_max) {
        config_fail("aug_scale_min", "scale range must satisfy 0 < min <= max");
    }

    DataConfig& d = rc.data;
    d.kind = get_field<std::string>(j, "data_kind",
                                    rc.task == Task::classification ? "synth_digits" : "synth_keypoints");
    if (d.kind != "synth_digits" && d.kind != "synth_keypoints" && d.kind != "idx") {
        config_fail("data_kind", "must be synth_digits | synth_keypoints | idx, got '" + d.kind + "'");
    }
    if (rc.task == Task::pose && d.kind != "synth_keypoints") {
        config_fail("data_kind", "pose task needs synth_keypoints data");
    }
    d.classes = get_field<int>(j, "data_classes", 10);
    d.joints = get_field<int>(j, "data_joints", 4);
    d.image_size = get_field<std::size_t>(j, "data_image_size",
                                          rc.task == Task::classification ? 32 : 64);
    d.train_count = get_field<std::size_t>(j, "data_train_count",
                                           rc.task == Task::classification ? 608 : 320);
    d.eval_count = get_field<std::size_t>(j, "data_eval_count",
                                          rc.task == Task::classification ? 256 : 128);
    d.seed = get_field<std::uint64_t>(j, "data_seed", 7);
    d.idx_images = get_field<std::string>(j, "idx_images", "");
    d.idx_labels = get_field<std::string>(j, "idx_labels", "");
    d.shift.invert = get_field<bool>(j, "shift_invert", true);
    d.shift.noise_sigma = get_field<double>(j, "shift_noise_sigma", 0.2);
    d.shift.texture_amp = get_field<double>(j, "shift_texture_amp", 0.3);
    d.shift.contrast = get_field<double>(j, "shift_contrast", 1.0);
    d.shift.brightness = get_field<double>(j, "shift_brightness", 0.0);
    d.shift.seed = get_field<std::uint64_t>(j, "shift_seed", 99);
    if (d.shift.noise_sigma < 0.0) config_fail("shift_noise_sigma", "must be >= 0");
    if (d.shift.contrast < 0.0) config_fail("shift_contrast", "must be >= 0");
    if (d.kind == "idx" && (d.idx_images.empty() || d.idx_labels.empty())) {
        config_fail("idx_images", "data_kind=idx needs idx_images and idx_labels paths");
    }

    t.validate();
    return rc;
}

inline nlohmann::json run_config_to_json(const RunConfig& rc) {
    const TrainConfig& t = rc.train;
    const DataConfig& d = rc.data;
    nlohmann::json j;
    j["task"] = task_name(rc.task);
    j["method"] = method_name(rc.method);
    j["seed"] = rc.seed;
    j["out_dir"] = rc.out_dir;
    j["lambda_unsup"] = t.lambda_unsup;
    j["alpha_mode"] = t.alpha_policy.mode == AlphaPolicy::Mode::uniform01 ? "uniform01" : "fixed";
    j["alpha_fixed"] = t.alpha_policy.fixed_value;
    j["percentile_p"] = t.percentile_p;
    j["ema_decay"] = t.ema_decay;
    j["lr"] = t.lr;
    j["lr_decay_epochs"] = t.lr_decay_epochs;
    j["lr_decay_factor"] = t.lr_decay_factor;
    j["total_epochs"] = t.total_epochs;
    j["pretrain_epochs"] = t.pretrain_epochs;
    j["batch_size"] = t.batch_size;
    j["stat_scope"] = t.stat_scope == StatScope::minibatch ? "minibatch" : "per_instance";
    j["stylize_eps"] = t.stylize_eps;
    j["stylize_stop_stats_grad"] = t.stylize_stop_stats_grad;
    j["beta_collect"] = t.beta_collect == TrainConfig::BetaCollect::both ? "both" : "target_only";
    j["keep_ratio"] = t.keep_ratio;
    j["teacher_source_stats"] =
        t.teacher_source_stats == TrainConfig::TeacherSourceStats::student ? "student" : "teacher";
    j["soft_pseudo_labels"] = t.soft_pseudo_labels;
    j["heatmap_sigma"] = t.heatmap_sigma;
    j["pck_threshold"] = t.pck_threshold;
    j["model_width"] = t.model_width;
    j["aug_rotation_deg"] = t.augment.rotation_deg;
    j["aug_shear_deg"] = t.augment.shear_deg;
    j["aug_translate_frac"] = t.augment.translate_frac;
    j["aug_scale_min"] = t.augment.scale_min;
    j["aug_scale_max"] = t.augment.scale_max;
    j["aug_contrast"] = t.augment.contrast;
    j["data_kind"] = d.kind;
    j["data_classes"] = d.classes;
    j["data_joints"] = d.joints;
    j["data_image_size"] = d.image_size;
    j["data_train_count"] = d.train_count;
    j["data_eval_count"] = d.eval_count;
    j["data_seed"] = d.seed;
    j["idx_images"] = d.idx_images;
    j["idx_labels"] = d.idx_labels;
    j["shift_invert"] = d.shift.invert;
    j["shift_noise_sigma"] = d.shift.noise_sigma;
    j["shift_texture_amp"] = d.shift.texture_amp;
    j["shift_contrast"] = d.shift.contrast;
    j["shift_brightness"] = d.shift.brightness;
    j["shift_seed"] = d.shift.seed;
    return j;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw detail::ConfigError("cannot open config file '" + path + "'");
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw detail::ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
    }
    return parse_run_config(j);
}

/// Applies a flat "key=value" override; values parse as JSON when possible
/// and fall back to strings.
inline void apply_override(nlohmann::json& j, const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw detail::ConfigError("override '" + kv + "' must look like key=value");
    }
    const std::string key = kv.substr(0, eq);
    const std::string value = kv.substr(eq + 1);
    nlohmann::json parsed = nlohmann::json::parse(value, nullptr, false);
    if (parsed.is_discarded()) {
        j[key] = value;
    } else {
        j[key] = parsed;
    }
}

// ---------------------------------------------------------------------------
// Dataset provisioning
// ---------------------------------------------------------------------------

/// Builds disjoint source/target training pools and a held-out shifted
/// target evaluation split, deterministically from the data config.
inline TrainData build_datasets(const DataConfig& d) {
    TrainData td;
    if (d.kind == "synth_digits" || d.kind == "synth_keypoints") {
        auto gen = [&](std::size_t count, std::uint64_t seed) {
            return d.kind == "synth_digits"
                       ? gen_synth_digits(count, d.classes, d.image_size, seed)
                       : gen_synth_keypoints(count, d.joints, d.image_size, seed);
        };
        td.source_train = gen(d.train_count, mix_seed(d.seed, 1));
        td.target_train = apply_domain_shift(gen(d.train_count, mix_seed(d.seed, 2)), d.shift);
        td.target_eval = apply_domain_shift(gen(d.eval_count, mix_seed(d.seed, 3)), d.shift);
    } else if (d.kind == "idx") {
        Dataset full = dataset_from_idx(d.idx_images, d.idx_labels);
        const std::size_t need = 2 * d.train_count + d.eval_count;
        if (full.size() < need) {
            throw detail::ConfigError("idx dataset has " + std::to_string(full.size()) +
                                      " samples, need " + std::to_string(need));
        }
        auto take = [&](std::size_t start, std::size_t count) {
            Dataset ds;
            ds.images = Tensor({count, full.images.dim(1), full.images.dim(2), full.images.dim(3)});
            const std::size_t stride = full.images.numel() / full.size();
            std::copy(full.images.ptr() + start * stride, full.images.ptr() + (start + count) * stride,
                      ds.images.ptr());
            for (std::size_t i = 0; i < count; ++i) {
                ds.labels.push_back(full.labels[start + i]);
                ds.ids.push_back(static_cast<std::int64_t>(start + i));
            }
            return ds;
        };
        td.source_train = take(0, d.train_count);
        td.target_train = apply_domain_shift(take(d.train_count, d.train_count), d.shift);
        td.target_eval = apply_domain_shift(take(2 * d.train_count, d.eval_count), d.shift);
    }
    td.source_train.domain = Domain::source;
    td.target_train.domain = Domain::target;
    td.target_eval.domain = Domain::target;
    // Target training data is unlabeled by contract; keep labels only on the
    // eval split (they are never trained on).
    td.target_train.labels.clear();
    if (td.target_train.has_keypoints()) td.target_train.keypoints = Tensor();
    return td;
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t tt = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::tm tm_utc{};
    gmtime_r(&tt, &tm_utc);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    return buf;
}

inline void write_text_atomic(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::trunc | std::ios::binary);
        if (!f) throw std::runtime_error("cannot write '" + tmp + "'");
        f << content;
    }
    std::filesystem::rename(tmp, path);
}

inline nlohmann::json make_run_manifest(const std::string& command, const RunConfig& rc,
                                        const nlohmann::json& final_metrics,
                                        const std::string& started, const std::string& finished,
                                        const nlohmann::json& outputs) {
    nlohmann::json m;
    m["artifact_version"] = kArtifactVersion;
    m["command"] = command;
    m["config"] = run_config_to_json(rc);
    m["seed"] = rc.seed;
    m["out_dir"] = rc.out_dir;
    m["started_utc"] = started;
    m["finished_utc"] = finished;
    m["final_metrics"] = final_metrics;
    m["outputs"] = outputs;
    return m;
}

}  // namespace imsty
