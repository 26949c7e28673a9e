// Command-line front end: synthetic data generation, self-supervised
// pretraining, joint training, finetuning, evaluation, expert analysis, and
// benchmarking.

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "CLI11.hpp"
#include "doremi/checkpoint.hpp"
#include "doremi/kernels.hpp"
#include "doremi/pretrain.hpp"
#include "doremi/train.hpp"

namespace fs = std::filesystem;
using namespace doremi;

namespace {

CorpusManifest corpus_for(const TrainConfig& cfg) {
    if (cfg.corpus.empty()) throw ConfigError("config must name a corpus manifest");
    return load_manifest(cfg.corpus);
}

TrainConfig config_for(const std::string& config_path, std::uint64_t seed, bool seed_set) {
    TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_train_config(config_path);
    if (seed_set) cfg.seed = seed;
    return cfg;
}

int cmd_gen_data(const std::string& config_path, const std::string& out_dir) {
    fs::create_directories(out_dir);
    CorpusManifest manifest;
    if (!config_path.empty()) {
        manifest = load_manifest(config_path);
    } else {
        manifest = standard_corpus();
    }
    save_manifest(manifest, out_dir + "/manifest.json");
    int written = 0;
    for (const auto& d : manifest.domains) {
        for (const auto& [split_name, range] :
             {std::pair<std::string, SplitRange>{"train", d.train}, {"eval", d.eval}}) {
            for (int i = 0; i < range.count; ++i) {
                PointCloud cloud =
                    generate_scene(d.spec, range.seed_base + static_cast<std::uint64_t>(i));
                const std::string path = out_dir + "/d" + std::to_string(d.spec.domain_id) +
                                         "_" + split_name + "_" + std::to_string(i) + ".dpc";
                save_cloud(cloud, path);
                PointCloud back = load_cloud(path);
                if (back.positions != cloud.positions || back.colors != cloud.colors ||
                    back.labels != cloud.labels)
                    throw FormatError("cloud round-trip mismatch for " + path);
                ++written;
            }
        }
    }
    std::printf("wrote manifest and %d scenes to %s\n", written, out_dir.c_str());
    return 0;
}

int cmd_pretrain(const std::string& corpus_path, int epochs, std::uint64_t seed,
                 const std::string& out_path, double voxel_size) {
    CorpusManifest corpus = load_manifest(corpus_path);
    PretrainConfig cfg;
    cfg.backbone.voxel_size = voxel_size;
    cfg.epochs = epochs;
    PretrainModel model = make_pretrain_model(cfg, seed);
    PretrainRunResult r = run_pretraining(model, corpus, epochs, seed, true);
    if (const auto dir = fs::path(out_path).parent_path(); !dir.empty())
        fs::create_directories(dir);
    save_pretrain_checkpoint(model, out_path);
    std::printf("pretrained %d epochs, final loss %.6f, checkpoint %s (hash %016llx)\n", epochs,
                r.epoch_losses.empty() ? 0.0 : r.epoch_losses.back(), out_path.c_str(),
                static_cast<unsigned long long>(file_hash(out_path)));
    return 0;
}

int cmd_train(const TrainConfig& cfg, const std::string& out_dir) {
    CorpusManifest corpus = corpus_for(cfg);
    if (!cfg.grid_rows.empty()) {
        std::vector<std::uint64_t> seeds =
            cfg.grid_seeds.empty() ? std::vector<std::uint64_t>{cfg.seed} : cfg.grid_seeds;
        auto rows = run_ablation(cfg, corpus, cfg.grid_rows, seeds, out_dir, true, 2);
        std::printf("%-12s %-8s %8s %8s %8s %8s\n", "row", "seed", "mIoU", "mAcc", "allAcc",
                    "alpha");
        for (const auto& r : rows)
            std::printf("%-12s %-8llu %8.4f %8.4f %8.4f %8.4f\n", r.name.c_str(),
                        static_cast<unsigned long long>(r.seed), r.report.miou, r.report.macc,
                        r.report.all_acc, r.report.alpha);
        return 0;
    }
    SegModel model = make_seg_model(cfg, corpus, cfg.seed);
    JointTrainResult r = joint_train(cfg, corpus, model, out_dir, true);
    std::printf("train done: %d epochs, final loss %.6f, eval mIoU %.4f (seed %llu)\n",
                cfg.epochs, r.epoch_losses.empty() ? 0.0 : r.epoch_losses.back(),
                r.eval_report.miou, static_cast<unsigned long long>(cfg.seed));
    if (!out_dir.empty())
        std::printf("checkpoint hash %016llx\n",
                    static_cast<unsigned long long>(r.checkpoint_hash));
    return 0;
}

int cmd_finetune(const TrainConfig& cli_cfg, const std::string& ckpt, int epochs,
                 std::uint64_t seed, const std::string& out_dir, int target_domain) {
    CorpusManifest corpus = corpus_for(cli_cfg);
    SegModel model = load_seg_model(ckpt, corpus);
    model.cfg.corpus = cli_cfg.corpus;
    int target = target_domain;
    if (target < 0) {
        auto held = corpus.held_out_domain_ids();
        if (held.empty()) throw ConfigError("corpus has no held-out domain to finetune on");
        target = held.front();
    }
    FinetuneResult r = finetune(model, corpus, target, epochs, seed, out_dir, true);
    std::printf("finetune domain %d: zero-shot mIoU %.4f -> %.4f after %d epochs\n", target,
                r.zero_shot.miou, r.final_report.miou, epochs);
    return 0;
}

int cmd_eval(const TrainConfig& cli_cfg, const std::string& ckpt, const std::string& split,
             const std::string& out_dir) {
    CorpusManifest corpus = corpus_for(cli_cfg);
    SegModel model = load_seg_model(ckpt, corpus);
    EvalOptions opt;
    opt.split = split;
    opt.threads = 2;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        opt.trace_dir = out_dir + "/traces";
    }
    MetricsReport report = evaluate(model, corpus, opt);
    if (!out_dir.empty()) {
        save_report(report, out_dir + "/report.json");
        save_utilization_csv(report.utilization, out_dir + "/utilization.csv");
        save_utilization_svg(report.utilization, out_dir + "/utilization.svg");
    }
    std::printf("mIoU %.4f mAcc %.4f allAcc %.4f alpha %.4f over %lld points\n", report.miou,
                report.macc, report.all_acc, report.alpha,
                static_cast<long long>(report.evaluated_points));
    return 0;
}

int cmd_analyze_experts(const std::string& trace_dir, int num_experts,
                        const std::string& out_dir) {
    std::vector<TraceRow> rows;
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(trace_dir))
        if (entry.path().extension() == ".csv") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        auto part = load_trace_csv(f.string());
        rows.insert(rows.end(), part.begin(), part.end());
    }
    if (rows.empty()) throw ConfigError("no trace rows found in " + trace_dir);

    int max_expert = 0;
    for (const auto& r : rows)
        for (int j : r.active) max_expert = std::max(max_expert, j);
    const int k = num_experts > 0 ? num_experts : max_expert + 1;

    auto hist = expert_utilization(rows, k);
    std::vector<double> counts(static_cast<std::size_t>(k), 0.0);
    for (const auto& r : rows)
        for (int j : r.active) counts[static_cast<std::size_t>(j)] += 1.0;
    const double alpha = alpha_metric(counts);

    std::printf("alpha %.6f over %zu trace rows\n", alpha, rows.size());
    for (const auto& [domain, h] : hist) {
        std::printf("domain %d:", domain);
        int best = 0;
        for (std::size_t j = 0; j < h.size(); ++j) {
            std::printf(" %.4f", h[j]);
            if (h[j] > h[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
        }
        std::printf("  (top expert %d)\n", best);
    }
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        save_utilization_csv(hist, out_dir + "/utilization.csv");
        save_utilization_svg(hist, out_dir + "/utilization.svg");
        std::ofstream alpha_out(out_dir + "/alpha.json");
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.17g", alpha);
        alpha_out << "{\n  \"alpha\": " << buf << ",\n  \"rows\": " << rows.size() << "\n}\n";
    }
    return 0;
}

int cmd_bench(const TrainConfig& cli_cfg, const std::string& ckpt, const std::string& split,
              const std::string& out_dir) {
    CorpusManifest corpus = corpus_for(cli_cfg);
    SegModel model = load_seg_model(ckpt, corpus);
    BenchResult r = bench(model, corpus, split);
    std::printf("activated params %lld (mean active k %.3f), throughput %.2f scenes/s\n",
                static_cast<long long>(r.activated_params), r.mean_active_k,
                r.throughput_scenes_per_s);
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        std::ofstream out(out_dir + "/bench.json");
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.17g", r.throughput_scenes_per_s);
        out << "{\n  \"activated_params\": " << r.activated_params
            << ",\n  \"mean_active_k\": " << r.mean_active_k
            << ",\n  \"throughput_scenes_per_s\": " << buf << "\n}\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DoReMi mixture-of-experts point-cloud harness"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may follow the subcommand

    std::string config_path, out_dir;
    std::uint64_t seed = 7;
    bool seed_set = false;
    app.add_option("--config", config_path, "JSON config file")->configurable(false);
    app.add_option("--seed", seed, "override the config seed")
        ->each([&](const std::string&) { seed_set = true; });
    app.add_option("--out", out_dir, "output directory (checkpoint path for pretrain)");

    auto* gen = app.add_subcommand("gen-data", "generate and serialize a synthetic corpus");

    auto* pre = app.add_subcommand("pretrain", "multi-attribute self-supervised pretraining");
    std::string pre_corpus;
    int pre_epochs = 20;
    double pre_voxel = 0.1;
    pre->add_option("--corpus", pre_corpus, "corpus manifest")->required();
    pre->add_option("--epochs", pre_epochs, "training epochs");
    pre->add_option("--voxel-size", pre_voxel, "voxel size in scene units");

    auto* train_cmd = app.add_subcommand("train", "joint multi-domain training");

    auto* ft = app.add_subcommand("finetune", "finetune on a (possibly unseen) domain");
    std::string ft_ckpt;
    int ft_epochs = 10, ft_domain = -1;
    ft->add_option("--ckpt", ft_ckpt, "base checkpoint from train")->required();
    ft->add_option("--epochs", ft_epochs, "finetune epochs");
    ft->add_option("--domain", ft_domain, "target domain id (default: first held-out)");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string ev_ckpt, ev_split = "eval";
    ev->add_option("--ckpt", ev_ckpt, "checkpoint to evaluate")->required();
    ev->add_option("--split", ev_split, "split name");

    auto* an = app.add_subcommand("analyze-experts", "utilization histograms from routing traces");
    std::string an_traces;
    int an_experts = 0;
    an->add_option("--traces", an_traces, "directory of routing trace CSVs")->required();
    an->add_option("--experts", an_experts, "expert count (default: inferred)");

    auto* be = app.add_subcommand("bench", "activated parameters and throughput");
    std::string be_ckpt, be_split = "eval";
    be->add_option("--ckpt", be_ckpt, "checkpoint to benchmark")->required();
    be->add_option("--split", be_split, "split name");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed())
            return cmd_gen_data(config_path, out_dir.empty() ? "corpus" : out_dir);
        if (pre->parsed()) {
            // For pretrain, --out names the checkpoint file.
            const std::string ckpt = out_dir.empty() ? "pretrained.ckpt" : out_dir;
            return cmd_pretrain(pre_corpus, pre_epochs, seed, ckpt, pre_voxel);
        }
        if (train_cmd->parsed()) {
            TrainConfig cfg = config_for(config_path, seed, seed_set);
            return cmd_train(cfg, out_dir);
        }
        if (ft->parsed()) {
            TrainConfig cfg = config_for(config_path, seed, seed_set);
            return cmd_finetune(cfg, ft_ckpt, ft_epochs, cfg.seed, out_dir, ft_domain);
        }
        if (ev->parsed()) {
            TrainConfig cfg = config_for(config_path, seed, seed_set);
            return cmd_eval(cfg, ev_ckpt, ev_split, out_dir);
        }
        if (an->parsed()) return cmd_analyze_experts(an_traces, an_experts, out_dir);
        if (be->parsed()) {
            TrainConfig cfg = config_for(config_path, seed, seed_set);
            return cmd_bench(cfg, be_ckpt, be_split, out_dir);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
