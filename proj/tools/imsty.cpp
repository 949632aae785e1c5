// Command-line front end: train | eval | profile | export-features | gen-data.
// Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "imsty/checkpoint.hpp"
#include "imsty/config.hpp"
#include "imsty/mean_teacher.hpp"
#include "imsty/metrics.hpp"
#include "imsty/parallel.hpp"
#include "imsty/profiler.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

json load_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw UsageError("cannot open config file '" + path + "'");
    json j = json::parse(f, nullptr, false);
    if (j.is_discarded()) throw UsageError("file '" + path + "' is not valid JSON");
    return j;
}

imsty::RunConfig resolve_config(const std::string& config_path,
                                const std::vector<std::string>& overrides, const std::string& seed,
                                const std::string& out, const std::string& method,
                                const std::string& task) {
    json j = load_json_file(config_path);
    if (j.contains("config")) j = j.at("config");  // accept run manifests
    for (const std::string& kv : overrides) imsty::apply_override(j, kv);
    if (!seed.empty()) j["seed"] = std::stoull(seed);
    if (!out.empty()) j["out_dir"] = out;
    if (!method.empty()) j["method"] = method;
    if (!task.empty()) j["task"] = task;
    return imsty::parse_run_config(j);
}

std::vector<imsty::NamedTensor> model_state(const std::string& prefix, const imsty::Model& m) {
    std::vector<imsty::NamedTensor> out;
    for (const imsty::NamedTensor& nt : m.named_tensors()) out.push_back({prefix + nt.name, nt.tensor});
    return out;
}

imsty::Model rebuild_model(const imsty::RunConfig& rc) {
    const std::size_t size = rc.data.image_size;
    if (rc.task == imsty::Task::classification) {
        return imsty::Model(imsty::build_lenet5_classifier(1, rc.data.classes, size), size, size, 0);
    }
    return imsty::Model(imsty::build_pose_model(1, rc.data.joints, rc.train.model_width), size, size, 0);
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& seed, const std::string& out, const std::string& method,
              const std::string& task) {
    const std::string started = imsty::utc_timestamp();
    imsty::RunConfig rc = resolve_config(config_path, overrides, seed, out, method, task);
    imsty::TrainData data = imsty::build_datasets(rc.data);
    fs::create_directories(rc.out_dir);

    std::cout << "training task=" << imsty::task_name(rc.task) << " method="
              << imsty::method_name(rc.method) << " seed=" << rc.seed << " epochs="
              << rc.train.total_epochs << " (" << rc.train.pretrain_epochs << " pretrain)\n";
    imsty::TrainOutput result = imsty::run_training(rc.train, data, rc.task, rc.method);
    for (const imsty::EpochRecord& r : result.history) {
        std::cout << "epoch " << r.epoch << " [" << r.phase << "] loss=" << r.loss_total
                  << " target_metric=" << r.target_metric << " beta=" << r.beta << "\n";
    }

    const std::string history_path = (fs::path(rc.out_dir) / "history.csv").string();
    imsty::write_text_atomic(history_path, imsty::history_to_csv(result.history));

    std::vector<imsty::NamedTensor> state = model_state("student.", result.student);
    if (result.teacher) {
        std::vector<imsty::NamedTensor> tea = model_state("teacher.", *result.teacher);
        state.insert(state.end(), tea.begin(), tea.end());
    }
    const std::string ckpt_path = (fs::path(rc.out_dir) / "final.ckpt").string();
    imsty::save_checkpoint(ckpt_path, state);

    json metrics;
    metrics["target_metric"] = result.final_metric;
    json outputs;
    outputs["history_csv"] = "history.csv";
    outputs["checkpoint"] = "final.ckpt";
    const json manifest = imsty::make_run_manifest("train", rc, metrics, started,
                                                   imsty::utc_timestamp(), outputs);
    imsty::write_text_atomic((fs::path(rc.out_dir) / "run_manifest.json").string(),
                             manifest.dump(2) + "\n");
    std::cout << "final target metric " << result.final_metric << "\n";
    return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_spec,
             const std::vector<std::string>& overrides, const std::string& out,
             const std::string& split) {
    const std::string started = imsty::utc_timestamp();
    imsty::RunConfig rc = resolve_config(data_spec, overrides, "", out.empty() ? "" : out, "", "");
    imsty::TrainData data = imsty::build_datasets(rc.data);
    const imsty::Dataset* ds = nullptr;
    if (split == "target") {
        ds = &data.target_eval;
    } else if (split == "source") {
        ds = &data.source_train;
    } else {
        throw UsageError("--split must be 'source' or 'target'");
    }

    imsty::Model model = rebuild_model(rc);
    model.load_state(imsty::load_checkpoint(checkpoint), "student.");
    model.set_requires_grad(false);

    std::ostringstream table;
    std::ostringstream csv;
    csv << std::setprecision(12);
    csv << "metric,value,samples,epoch\n";
    if (rc.task == imsty::Task::classification) {
        const double acc = imsty::evaluate_model(model, *ds, rc.task, rc.data.image_size,
                                                 rc.train.pck_threshold);
        table << "accuracy (" << split << ", " << ds->size() << " samples): " << acc << "\n";
        csv << "accuracy," << acc << "," << ds->size() << ",0\n";
    } else {
        imsty::NoGradScope ng;
        std::vector<double> coords;
        const std::size_t J = ds->keypoints.dim(1);
        for (std::size_t start = 0; start < ds->size(); start += 32) {
            std::vector<std::size_t> idx;
            for (std::size_t i = start; i < std::min(ds->size(), start + 32); ++i) idx.push_back(i);
            imsty::DomainBatch b = imsty::make_batch(*ds, idx, false);
            imsty::Tensor heat = model.forward(b.images, false);
            imsty::Tensor c = imsty::decode_keypoints(heat);
            const double ratio = static_cast<double>(rc.data.image_size) / static_cast<double>(heat.dim(2));
            for (std::size_t n = 0; n < idx.size(); ++n) {
                for (std::size_t jj = 0; jj < J; ++jj) {
                    coords.push_back(imsty::heatmap_to_image(c(n, jj, 0), ratio));
                    coords.push_back(imsty::heatmap_to_image(c(n, jj, 1), ratio));
                }
            }
        }
        imsty::Tensor pred = imsty::Tensor::from_data({ds->size(), J, 2}, std::move(coords));
        const std::vector<double> per_joint =
            imsty::pck_per_joint(pred, ds->keypoints, rc.data.image_size, rc.train.pck_threshold);
        table << "PCK@" << rc.train.pck_threshold << " (" << split << ", " << ds->size() << " samples)\n";
        for (std::size_t jj = 0; jj + 1 < per_joint.size(); ++jj) {
            table << "  J" << jj << ": " << per_joint[jj] << "\n";
            csv << "pck_joint" << jj << "," << per_joint[jj] << "," << ds->size() << ",0\n";
        }
        table << "  All: " << per_joint.back() << "\n";
        csv << "pck_all," << per_joint.back() << "," << ds->size() << ",0\n";
    }
    std::cout << table.str();
    if (!out.empty()) {
        fs::create_directories(out);
        imsty::write_text_atomic((fs::path(out) / "metrics.csv").string(), csv.str());
        const json manifest = imsty::make_run_manifest(
            "eval", rc, json::object(), started, imsty::utc_timestamp(),
            json{{"metrics_csv", "metrics.csv"}, {"checkpoint", checkpoint}, {"split", split}});
        imsty::write_text_atomic((fs::path(out) / "run_manifest.json").string(),
                                 manifest.dump(2) + "\n");
    }
    return kExitOk;
}

int cmd_profile(const std::string& graph_arg, std::size_t resolution, int batch,
                const std::string& csv_out) {
    imsty::LayerGraph graph;
    if (graph_arg.rfind("builtin:", 0) == 0) {
        graph = imsty::builtin_graph(graph_arg.substr(8));
    } else {
        std::ifstream f(graph_arg);
        if (!f) throw UsageError("cannot open graph file '" + graph_arg + "'");
        std::stringstream ss;
        ss << f.rdbuf();
        graph = imsty::parse_graph(ss.str());
    }
    const imsty::CostReport rep = imsty::profile_graph(graph, resolution, batch);
    std::cout << imsty::render_cost_report(rep);
    if (!csv_out.empty()) imsty::write_text_atomic(csv_out, imsty::render_cost_csv(rep));
    return kExitOk;
}

int cmd_export_features(const std::string& checkpoint, const std::string& data_spec,
                        const std::vector<std::string>& overrides, const std::string& out_file,
                        bool full) {
    imsty::RunConfig rc = resolve_config(data_spec, overrides, "", "", "", "");
    imsty::TrainData data = imsty::build_datasets(rc.data);
    imsty::Model model = rebuild_model(rc);
    model.load_state(imsty::load_checkpoint(checkpoint), "student.");
    model.set_requires_grad(false);
    // Export uses the held-out eval geometry: source pool + shifted target.
    imsty::Dataset source_eval = data.source_train;
    imsty::export_features(model, {&source_eval, &data.target_eval}, out_file, full);
    std::cout << "wrote " << out_file << "\n";
    return kExitOk;
}

int cmd_gen_data(const std::string& spec_path, const std::vector<std::string>& overrides,
                 const std::string& out_dir) {
    imsty::RunConfig rc = resolve_config(spec_path, overrides, "", "", "", "");
    imsty::TrainData data = imsty::build_datasets(rc.data);
    fs::create_directories(out_dir);
    imsty::export_dataset(data.source_train, (fs::path(out_dir) / "source_train").string());
    imsty::export_dataset(data.target_train, (fs::path(out_dir) / "target_train").string());
    imsty::export_dataset(data.target_eval, (fs::path(out_dir) / "target_eval").string());
    std::cout << "wrote " << data.source_train.size() << " source, " << data.target_train.size()
              << " target train, " << data.target_eval.size() << " target eval samples under "
              << out_dir << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    // IMSTY_THREADS caps worker threads; default is the hardware concurrency.
    int threads = static_cast<int>(std::thread::hardware_concurrency());
    if (threads < 1) threads = 1;
    if (const char* env = std::getenv("IMSTY_THREADS")) {
        const int cap = std::atoi(env);
        if (cap >= 1) threads = std::min(threads, cap);
    }
    imsty::set_num_threads(threads);

    CLI::App app{"implicit-stylization domain adaptation trainer"};
    app.require_subcommand(1);

    std::string config_path, seed, out, method, task;
    std::vector<std::string> overrides;
    auto* train = app.add_subcommand("train", "run a training experiment");
    train->add_option("--config", config_path, "JSON config file (or run manifest)")->required();
    train->add_option("--seed", seed, "override the run seed");
    train->add_option("--out", out, "override the output directory");
    train->add_option("--method", method, "source_only | mean_teacher_no_style | imsty");
    train->add_option("--task", task, "classification | pose");
    train->add_option("--set", overrides, "flat config override key=value (repeatable)");

    std::string checkpoint, split = "target";
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    eval->add_option("--data", config_path, "dataset spec (config JSON)")->required();
    eval->add_option("--split", split, "source | target (default target)");
    eval->add_option("--out", out, "optional output directory for metrics.csv");
    eval->add_option("--set", overrides, "flat config override key=value (repeatable)");

    std::string graph_arg, profile_csv;
    std::size_t resolution = 256;
    int batch = 1;
    auto* profile = app.add_subcommand("profile", "parameter / MAC cost report for a layer graph");
    profile->add_option("--graph", graph_arg, "graph text file or builtin:<name>")->required();
    profile->add_option("--resolution", resolution, "input resolution (default 256)");
    profile->add_option("--batch", batch, "batch size for the imsty rows (default 1)");
    profile->add_option("--csv", profile_csv, "also write the report as CSV");

    std::string export_out;
    bool export_full = false;
    auto* exportf = app.add_subcommand("export-features", "write alignment-tap features as CSV");
    exportf->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    exportf->add_option("--data", config_path, "dataset spec (config JSON)")->required();
    exportf->add_option("--out", export_out, "output CSV path")->required();
    exportf->add_flag("--full", export_full, "export the full tap instead of channel means");
    exportf->add_option("--set", overrides, "flat config override key=value (repeatable)");

    auto* gen = app.add_subcommand("gen-data", "materialize synthetic datasets");
    gen->add_option("--spec", config_path, "dataset spec (config JSON)")->required();
    gen->add_option("--out", out, "output directory")->required();
    gen->add_option("--set", overrides, "flat config override key=value (repeatable)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (train->parsed()) return cmd_train(config_path, overrides, seed, out, method, task);
        if (eval->parsed()) return cmd_eval(checkpoint, config_path, overrides, out, split);
        if (profile->parsed()) return cmd_profile(graph_arg, resolution, batch, profile_csv);
        if (exportf->parsed()) {
            return cmd_export_features(checkpoint, config_path, overrides, export_out, export_full);
        }
        if (gen->parsed()) return cmd_gen_data(config_path, overrides, out);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const imsty::detail::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}
