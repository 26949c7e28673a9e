#include "doremi/train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

#include "json.hpp"

namespace doremi {

using nlohmann::json;

BackboneConfig TrainConfig::backbone_config() const {
    BackboneConfig b;
    b.widths = widths;
    b.blocks = blocks;
    b.ffn_mult = ffn_mult;
    b.voxel_size = voxel_size;
    return b;
}

void TrainConfig::validate() const {
    if (lambda_balance < 0.0) throw ConfigError("lambda must be nonnegative");
    if (epochs < 0) throw ConfigError("epochs must be nonnegative");
    if (experts < 2) throw ConfigError("expert count must be at least 2");
    if (k_min < 1 || k_min > k_max || k_max > experts)
        throw ConfigError("k bounds must satisfy 1 <= k_min <= k_max <= K");
    if (fixed_k < 1 || fixed_k > experts) throw ConfigError("fixed_k must lie in [1, K]");
    if (tau <= 0.0) throw ConfigError("tau must be positive");
    backbone_config().validate();
    for (const auto& [s, b] : placement) {
        if (s < 0 || s >= static_cast<int>(blocks.size()))
            throw ConfigError("placement stage out of range");
        if (b < 0 || b >= blocks[static_cast<std::size_t>(s)])
            throw ConfigError("placement block out of range");
    }
}

namespace {

const char* const kKnownKeys[] = {
    "corpus",     "epochs",     "batch_scenes", "lr",        "weight_decay",
    "lambda",     "experts",    "k_min",        "k_max",     "fixed_k",
    "use_re",     "use_dsr",    "use_eda",      "placement", "seed",
    "eval_split", "pretrained", "voxel_size",   "widths",    "blocks",
    "ffn_mult",   "tau",        "domain_embed_dim", "n_classes",
    "grid_rows",  "grid_seeds",
};

json config_to_json(const TrainConfig& c) {
    json j;
    j["corpus"] = c.corpus;
    j["epochs"] = c.epochs;
    j["batch_scenes"] = c.batch_scenes;
    j["lr"] = c.lr;
    j["weight_decay"] = c.weight_decay;
    j["lambda"] = c.lambda_balance;
    j["experts"] = c.experts;
    j["k_min"] = c.k_min;
    j["k_max"] = c.k_max;
    j["fixed_k"] = c.fixed_k;
    j["use_re"] = c.use_re;
    j["use_dsr"] = c.use_dsr;
    j["use_eda"] = c.use_eda;
    j["placement"] = json::array();
    for (const auto& [s, b] : c.placement) j["placement"].push_back({s, b});
    j["seed"] = c.seed;
    j["eval_split"] = c.eval_split;
    j["pretrained"] = c.pretrained;
    j["voxel_size"] = c.voxel_size;
    j["widths"] = c.widths;
    j["blocks"] = c.blocks;
    j["ffn_mult"] = c.ffn_mult;
    j["tau"] = c.tau;
    j["domain_embed_dim"] = c.domain_embed_dim;
    j["n_classes"] = c.n_classes;
    j["grid_rows"] = c.grid_rows;
    j["grid_seeds"] = c.grid_seeds;
    return j;
}

TrainConfig config_from_json(const json& j) {
    for (const auto& [key, value] : j.items()) {
        (void)value;
        bool known = false;
        for (const char* k : kKnownKeys)
            if (key == k) known = true;
        if (!known) throw ConfigError("unknown config key: " + key);
    }
    TrainConfig c;
    c.corpus = j.value("corpus", c.corpus);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_scenes = j.value("batch_scenes", c.batch_scenes);
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.lambda_balance = j.value("lambda", c.lambda_balance);
    c.experts = j.value("experts", c.experts);
    c.k_min = j.value("k_min", c.k_min);
    c.k_max = j.value("k_max", c.k_max);
    c.fixed_k = j.value("fixed_k", c.fixed_k);
    c.use_re = j.value("use_re", c.use_re);
    c.use_dsr = j.value("use_dsr", c.use_dsr);
    c.use_eda = j.value("use_eda", c.use_eda);
    if (j.contains("placement")) {
        c.placement.clear();
        for (const auto& p : j["placement"])
            c.placement.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
    }
    c.seed = j.value("seed", c.seed);
    c.eval_split = j.value("eval_split", c.eval_split);
    c.pretrained = j.value("pretrained", c.pretrained);
    c.voxel_size = j.value("voxel_size", c.voxel_size);
    c.widths = j.value("widths", c.widths);
    c.blocks = j.value("blocks", c.blocks);
    c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
    c.tau = j.value("tau", c.tau);
    c.domain_embed_dim = j.value("domain_embed_dim", c.domain_embed_dim);
    c.n_classes = j.value("n_classes", c.n_classes);
    c.grid_rows = j.value("grid_rows", c.grid_rows);
    c.grid_seeds = j.value("grid_seeds", c.grid_seeds);
    c.validate();
    return c;
}

}  // namespace

std::string train_config_json(const TrainConfig& cfg) { return config_to_json(cfg).dump(2); }

TrainConfig parse_train_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    return config_from_json(j);
}

TrainConfig load_train_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_train_config(text);
}

TrainConfig apply_grid_row(TrainConfig base, const std::string& row) {
    if (row == "baseline") {
        base.use_re = base.use_dsr = base.use_eda = false;
        base.pretrained.clear();
    } else if (row == "re") {
        base.use_re = true;
        base.use_dsr = base.use_eda = false;
    } else if (row == "re_dsr") {
        base.use_re = base.use_dsr = true;
        base.use_eda = false;
    } else if (row == "full") {
        base.use_re = base.use_dsr = base.use_eda = true;
    } else if (row == "native_moe") {
        base.use_re = base.use_dsr = true;
        base.use_eda = false;
        base.lambda_balance = 0.0;
    } else {
        throw ConfigError("unknown ablation row: " + row);
    }
    return base;
}

void SegModel::renormalize_class_embeddings() {
    const int c = class_embeddings.rows(), d = class_embeddings.cols();
    auto v = class_embeddings.values();
    for (int i = 0; i < c; ++i) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += v[static_cast<std::size_t>(i) * d + j] *
                                         v[static_cast<std::size_t>(i) * d + j];
        const double inv = 1.0 / std::max(std::sqrt(s), 1e-12);
        for (int j = 0; j < d; ++j) v[static_cast<std::size_t>(i) * d + j] *= inv;
    }
}

SegModel make_seg_model(const TrainConfig& cfg, const CorpusManifest& corpus,
                        std::uint64_t seed) {
    cfg.validate();
    SegModel m;
    m.cfg = cfg;
    Rng rng(mix_seed(seed, 0x5E61D0ULL));
    const BackboneConfig bcfg = cfg.backbone_config();
    m.backbone = make_backbone(bcfg, rng, true);

    if (!cfg.pretrained.empty()) {
        ParamRegistry bb_only;
        m.backbone.register_params(bb_only, "backbone.");
        load_into(load_checkpoint(cfg.pretrained), bb_only);
    }

    m.domain_ids = corpus.training_domain_ids();
    if (cfg.use_re && cfg.use_dsr)
        m.domain_embeddings = Tensor::randn(
            {static_cast<int>(m.domain_ids.size()), cfg.domain_embed_dim}, rng, 0.02, true);

    if (cfg.use_re) {
        for (const auto& [s, b] : cfg.placement) {
            BlockParams& blk =
                m.backbone.stages[static_cast<std::size_t>(s)].blocks[static_cast<std::size_t>(b)];
            // The block FFN becomes the frozen Re expert.
            blk.ffn.up.weight.set_requires_grad(false);
            blk.ffn.up.bias.set_requires_grad(false);
            blk.ffn.down.weight.set_requires_grad(false);
            blk.ffn.down.bias.set_requires_grad(false);

            MoePoint mp;
            mp.stage = s;
            mp.block = b;
            mp.routed = cfg.use_dsr;
            const int width = cfg.widths[static_cast<std::size_t>(s)];
            if (mp.routed) {
                mp.layer = build_layer_from_pretrained(blk.ffn, cfg.experts, width,
                                                       cfg.domain_embed_dim, m.domain_embeddings,
                                                       m.domain_ids, rng);
                if (cfg.use_eda) {
                    mp.layer.k_min = cfg.k_min;
                    mp.layer.k_max = cfg.k_max;
                } else {
                    mp.layer.k_min = cfg.fixed_k;
                    mp.layer.k_max = cfg.fixed_k;
                }
            } else {
                mp.layer.bank.do_experts.push_back(clone_ffn(blk.ffn, true));
            }
            mp.layer.bank.re_expert = blk.ffn;  // shared handles, frozen above
            mp.layer.stage = s;
            mp.layer.block = b;
            m.moe.push_back(std::move(mp));
        }
    }

    const int w0 = cfg.widths[0];
    m.head = make_linear(w0, w0, rng, true);
    m.class_embeddings = Tensor::randn({cfg.n_classes, w0}, rng, 1.0, true);
    m.renormalize_class_embeddings();

    m.backbone.register_params(m.params, "backbone.");
    if (m.domain_embeddings.defined()) m.params.add("domain.embeddings", m.domain_embeddings);
    for (std::size_t i = 0; i < m.moe.size(); ++i) {
        const std::string prefix = "moe" + std::to_string(i) + ".";
        const MoePoint& mp = m.moe[i];
        if (mp.routed) {
            m.params.add(prefix + "dsr.weight", mp.layer.dsr_conv.weight);
            m.params.add(prefix + "dsr.bias", mp.layer.dsr_conv.bias);
            m.params.add(prefix + "dsr.gain", mp.layer.dsr_conv.gain);
            m.params.add(prefix + "dsr.offset", mp.layer.dsr_conv.offset);
            m.params.add_mlp(prefix + "gate", mp.layer.gate);
            m.params.add_mlp(prefix + "domain_mlp", mp.layer.table.projection);
        }
        for (std::size_t j = 0; j < mp.layer.bank.do_experts.size(); ++j)
            m.params.add_ffn(prefix + "expert" + std::to_string(j),
                             mp.layer.bank.do_experts[j]);
    }
    m.params.add_linear("head", m.head);
    m.params.add("class_embeddings", m.class_embeddings);
    return m;
}

void save_seg_checkpoint(const SegModel& model, const std::string& path) {
    json meta;
    meta["kind"] = "seg";
    meta["config"] = config_to_json(model.cfg);
    meta["domain_ids"] = model.domain_ids;
    save_checkpoint(path, model.params, meta.dump());
}

SegModel load_seg_model(const std::string& path, const CorpusManifest& corpus) {
    LoadedCheckpoint ckpt = load_checkpoint(path);
    json meta = json::parse(ckpt.meta_json);
    if (meta.value("kind", "") != "seg") throw FormatError("not a segmentation checkpoint");
    TrainConfig cfg = config_from_json(meta.at("config"));
    cfg.pretrained.clear();  // weights come from this checkpoint
    SegModel m = make_seg_model(cfg, corpus, cfg.seed);
    const auto ids = meta.at("domain_ids").get<std::vector<int>>();
    if (ids != m.domain_ids)
        throw FormatError("checkpoint domain ids do not match the corpus");
    load_into(ckpt, m.params);
    return m;
}

ModelForward seg_forward(Tape& tape, SegModel& model, const SceneTokens& scene) {
    ModelForward out;

    FfnOverride override_fn;
    if (!model.moe.empty()) {
        override_fn = [&](Tape& t, int stage, int block, const Tensor& h) -> Tensor {
            for (MoePoint& mp : model.moe) {
                if (mp.stage != stage || mp.block != block) continue;
                if (!mp.routed) {
                    Tensor f_do = ffn(t, h, mp.layer.bank.do_experts[0]);
                    Tensor f_re = ffn(t, h, mp.layer.bank.re_expert);
                    return add(t, f_do, f_re);
                }
                Tensor e_d;
                const int row = mp.layer.table.row_of(scene.domain_id);
                if (row >= 0) {
                    e_d = domain_vector(t, mp.layer.table, scene.domain_id);
                } else if (model.unseen_mode) {
                    std::vector<int> rows(mp.layer.table.domain_ids.size());
                    for (std::size_t r = 0; r < rows.size(); ++r) rows[r] = static_cast<int>(r);
                    e_d = unseen_domain_vector(t, mp.layer.table, rows);
                } else {
                    throw ConfigError("unknown domain id " + std::to_string(scene.domain_id) +
                                      " outside averaged-unseen mode");
                }
                LayerForward lf = doremi_layer_forward(
                    t, mp.layer, h, scene.plans[static_cast<std::size_t>(stage)], e_d);
                lf.stage = stage;
                lf.block = block;
                Tensor result = lf.out;
                out.balance_sum = out.balance_sum.defined()
                                      ? add(t, out.balance_sum, lf.balance)
                                      : lf.balance;
                out.moe.push_back(std::move(lf));
                return result;
            }
            return Tensor();
        };
    }

    BackboneOut bb = backbone_forward(tape, model.backbone, scene, override_fn);
    Tensor head_out = linear(tape, bb.full_res, model.head.weight, model.head.bias);
    Tensor feats_n = row_l2_normalize(tape, head_out);
    Tensor emb_n = row_l2_normalize(tape, model.class_embeddings);
    Tensor voxel_logits = scale(tape, matmul_bt(tape, feats_n, emb_n), 1.0 / model.cfg.tau);
    out.point_feats = gather_rows(tape, head_out, scene.vox.point_to_voxel);
    out.point_logits = gather_rows(tape, voxel_logits, scene.vox.point_to_voxel);
    return out;
}

Tensor infonce_class_loss(Tape& tape, const Tensor& features, const std::vector<int>& labels,
                          const Tensor& class_embeddings, double tau, int* excluded_out) {
    const int n = features.rows();
    const int c = class_embeddings.rows();
    if (static_cast<int>(labels.size()) != n)
        throw ConfigError("infonce: label count must match feature rows");
    std::vector<int> keep;
    std::vector<int> kept_labels;
    for (int i = 0; i < n; ++i) {
        if (labels[static_cast<std::size_t>(i)] >= 0 && labels[static_cast<std::size_t>(i)] < c) {
            keep.push_back(i);
            kept_labels.push_back(labels[static_cast<std::size_t>(i)]);
        }
    }
    if (excluded_out) *excluded_out = n - static_cast<int>(keep.size());
    if (keep.empty()) throw ConfigError("infonce: no labeled points");
    Tensor feats = static_cast<int>(keep.size()) == n ? features : gather_rows(tape, features, keep);
    Tensor logits = scale(tape,
                          matmul_bt(tape, row_l2_normalize(tape, feats),
                                    row_l2_normalize(tape, class_embeddings)),
                          1.0 / tau);
    return cross_entropy_labels(tape, logits, kept_labels);
}

Tensor seg_cross_entropy(Tape& tape, const Tensor& probs, const std::vector<int>& labels) {
    return cross_entropy_probs(tape, probs, labels);
}

namespace {

std::vector<int> int_labels(const SceneTokens& scene, int n_classes) {
    std::vector<int> labels(scene.point_labels.size());
    int excluded = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        labels[i] = static_cast<int>(scene.point_labels[i]);
        if (labels[i] < 0 || labels[i] >= n_classes) ++excluded;
    }
    if (excluded > 0)
        std::fprintf(stderr, "warning: %d unlabeled points excluded\n", excluded);
    return labels;
}

struct SceneEvalResult {
    ConfusionMatrix cm{1};
    std::vector<std::vector<TraceRow>> layer_traces;
    std::vector<double> expert_counts;
    std::int64_t points = 0;
};

SceneEvalResult evaluate_scene(SegModel& model, const PointCloud& cloud) {
    SceneTokens scene = build_scene_tokens(cloud, model.cfg.backbone_config());
    Tape tape;
    ModelForward fwd = seg_forward(tape, model, scene);

    SceneEvalResult r;
    r.cm = ConfusionMatrix(model.cfg.n_classes);
    r.points = scene.points;
    const int c = model.cfg.n_classes;
    const double* lv = fwd.point_logits.values().data();
    for (int i = 0; i < scene.points; ++i) {
        int best = 0;
        const double* row = lv + static_cast<std::size_t>(i) * c;
        for (int j = 1; j < c; ++j)
            if (row[j] > row[best]) best = j;
        r.cm.add(static_cast<int>(scene.point_labels[static_cast<std::size_t>(i)]), best);
    }

    const int K = model.expert_count();
    r.expert_counts.assign(static_cast<std::size_t>(K), 0.0);
    for (const LayerForward& lf : fwd.moe) {
        std::vector<TraceRow> rows;
        const int n = static_cast<int>(lf.decision.k.size());
        rows.reserve(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            TraceRow tr;
            tr.token = i;
            tr.domain_id = scene.domain_id;
            tr.entropy = lf.decision.entropy[static_cast<std::size_t>(i)];
            tr.k = lf.decision.k[static_cast<std::size_t>(i)];
            tr.active = lf.decision.active[static_cast<std::size_t>(i)];
            for (int j : tr.active) r.expert_counts[static_cast<std::size_t>(j)] += 1.0;
            rows.push_back(std::move(tr));
        }
        r.layer_traces.push_back(std::move(rows));
    }
    return r;
}

}  // namespace

MetricsReport evaluate(SegModel& model, const CorpusManifest& corpus, const EvalOptions& opt) {
    std::vector<int> domain_ids = opt.domain_ids.empty() ? model.domain_ids : opt.domain_ids;

    struct SceneRef {
        int domain_id;
        std::uint64_t seed;
        int index;
    };
    std::vector<SceneRef> refs;
    for (int id : domain_ids) {
        const SplitRange& range = corpus.split(id, opt.split);
        for (int i = 0; i < range.count; ++i)
            refs.push_back({id, range.seed_base + static_cast<std::uint64_t>(i), i});
    }
    if (refs.empty()) throw ConfigError("evaluation split is empty");

    std::vector<SceneEvalResult> results(refs.size());
    const int threads = std::max(1, std::min<int>(opt.threads, static_cast<int>(refs.size())));
    std::exception_ptr error;
    std::mutex error_mutex;
    auto worker = [&](int t) {
        try {
            for (std::size_t i = static_cast<std::size_t>(t); i < refs.size();
                 i += static_cast<std::size_t>(threads)) {
                PointCloud cloud =
                    generate_scene(corpus.domain(refs[i].domain_id).spec, refs[i].seed);
                results[i] = evaluate_scene(model, cloud);
            }
        } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!error) error = std::current_exception();
        }
    };
    if (threads == 1) {
        worker(0);
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker, t);
        for (auto& th : pool) th.join();
    }
    if (error) std::rethrow_exception(error);

    // Fixed-order merge keeps the report independent of thread scheduling.
    ConfusionMatrix cm(model.cfg.n_classes);
    const int K = model.expert_count();
    std::vector<double> counts(static_cast<std::size_t>(K), 0.0);
    std::vector<TraceRow> all_rows;
    std::int64_t points = 0;
    for (std::size_t i = 0; i < results.size(); ++i) {
        cm.merge(results[i].cm);
        for (std::size_t j = 0; j < counts.size(); ++j) counts[j] += results[i].expert_counts[j];
        points += results[i].points;
        for (std::size_t l = 0; l < results[i].layer_traces.size(); ++l) {
            const auto& rows = results[i].layer_traces[l];
            all_rows.insert(all_rows.end(), rows.begin(), rows.end());
            if (!opt.trace_dir.empty()) {
                std::filesystem::create_directories(opt.trace_dir);
                const std::string path = opt.trace_dir + "/trace_d" +
                                         std::to_string(refs[i].domain_id) + "_s" +
                                         std::to_string(refs[i].index) + "_l" +
                                         std::to_string(l) + ".csv";
                save_trace_csv(path, rows);
            }
        }
    }

    MetricsReport report;
    report.per_class_iou = cm.per_class_iou();
    report.miou = cm.miou();
    report.macc = cm.macc();
    report.all_acc = cm.all_acc();
    report.evaluated_points = points;
    report.expert_counts = counts;
    double total_counts = 0.0;
    for (double v : counts) total_counts += v;
    if (total_counts > 0.0) {
        report.alpha = alpha_metric(counts);
        report.utilization = expert_utilization(all_rows, K);
    }
    return report;
}

JointTrainResult joint_train(const TrainConfig& cfg, const CorpusManifest& corpus,
                             SegModel& model, const std::string& out_dir, bool verbose) {
    cfg.validate();
    for (int id : model.domain_ids) corpus.domain(id);  // throws if config names a missing domain

    struct Cached {
        SceneTokens tokens;
    };
    std::vector<std::vector<Cached>> scenes;  // per domain
    for (int id : model.domain_ids) {
        const DomainEntry& d = corpus.domain(id);
        std::vector<Cached> list;
        for (int i = 0; i < d.train.count; ++i) {
            Cached c;
            c.tokens = build_scene_tokens(
                generate_scene(d.spec, d.train.seed_base + static_cast<std::uint64_t>(i)),
                model.cfg.backbone_config());
            list.push_back(std::move(c));
        }
        scenes.push_back(std::move(list));
    }

    AdamW::Options opt_cfg;
    opt_cfg.lr = cfg.lr;
    opt_cfg.weight_decay = cfg.weight_decay;
    AdamW opt(model.params, opt_cfg);

    std::vector<Rng> domain_rng;
    for (std::size_t d = 0; d < scenes.size(); ++d)
        domain_rng.emplace_back(mix_seed(cfg.seed, 0xD011A1ULL + d));

    JointTrainResult result;
    std::size_t max_scenes = 0;
    for (const auto& list : scenes) max_scenes = std::max(max_scenes, list.size());

    for (int e = 0; e < cfg.epochs; ++e) {
        std::vector<std::vector<int>> order(scenes.size());
        for (std::size_t d = 0; d < scenes.size(); ++d) {
            order[d].resize(scenes[d].size());
            for (std::size_t i = 0; i < order[d].size(); ++i) order[d][i] = static_cast<int>(i);
            domain_rng[d].shuffle(order[d]);
        }
        // Round-robin domain interleaving.
        std::vector<const SceneTokens*> epoch_order;
        for (std::size_t i = 0; i < max_scenes; ++i)
            for (std::size_t d = 0; d < scenes.size(); ++d)
                if (i < scenes[d].size())
                    epoch_order.push_back(&scenes[d][static_cast<std::size_t>(order[d][i])].tokens);

        double total = 0.0;
        int counted = 0;
        const int batch = std::max(1, cfg.batch_scenes);
        for (std::size_t start = 0; start < epoch_order.size();
             start += static_cast<std::size_t>(batch)) {
            const std::size_t end =
                std::min(epoch_order.size(), start + static_cast<std::size_t>(batch));
            opt.zero_grad();
            // Gradients accumulate across the batch in fixed scene order.
            for (std::size_t s = start; s < end; ++s) {
                const SceneTokens& scene = *epoch_order[s];
                Tape tape;
                ModelForward fwd = seg_forward(tape, model, scene);
                std::vector<int> labels = int_labels(scene, cfg.n_classes);
                Tensor loss = cross_entropy_labels(tape, fwd.point_logits, labels);
                if (fwd.balance_sum.defined())
                    loss = add(tape, loss, scale(tape, fwd.balance_sum, cfg.lambda_balance));
                total += loss.scalar();
                ++counted;
                Tensor scaled = scale(tape, loss, 1.0 / static_cast<double>(end - start));
                tape.backward(scaled);
            }
            opt.step();
            model.renormalize_class_embeddings();
        }
        result.epoch_losses.push_back(counted > 0 ? total / counted : 0.0);
        if (verbose)
            std::fprintf(stderr, "epoch %d/%d loss %.6f\n", e + 1, cfg.epochs,
                         result.epoch_losses.back());
    }

    EvalOptions eopt;
    eopt.split = cfg.eval_split;
    eopt.threads = 2;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        eopt.trace_dir = out_dir + "/traces";
    }
    result.eval_report = evaluate(model, corpus, eopt);

    if (!out_dir.empty()) {
        std::ofstream cfg_out(out_dir + "/config.json");
        cfg_out << train_config_json(cfg) << "\n";
        save_seg_checkpoint(model, out_dir + "/checkpoint.ckpt");
        save_report(result.eval_report, out_dir + "/report.json");
        save_utilization_csv(result.eval_report.utilization, out_dir + "/utilization.csv");
        save_utilization_svg(result.eval_report.utilization, out_dir + "/utilization.svg");
        result.checkpoint_hash = file_hash(out_dir + "/checkpoint.ckpt");
    } else {
        result.checkpoint_hash = registry_hash(model.params);
    }
    return result;
}

FinetuneResult finetune(SegModel& model, const CorpusManifest& corpus, int target_domain,
                        int epochs, std::uint64_t seed, const std::string& out_dir,
                        bool verbose) {
    model.unseen_mode = true;
    FinetuneResult result;

    EvalOptions eopt;
    eopt.split = "eval";
    eopt.domain_ids = {target_domain};
    eopt.threads = 2;
    result.zero_shot = evaluate(model, corpus, eopt);

    const DomainEntry& d = corpus.domain(target_domain);
    std::vector<SceneTokens> scenes;
    for (int i = 0; i < d.train.count; ++i)
        scenes.push_back(build_scene_tokens(
            generate_scene(d.spec, d.train.seed_base + static_cast<std::uint64_t>(i)),
            model.cfg.backbone_config()));

    AdamW::Options opt_cfg;
    opt_cfg.lr = model.cfg.lr;
    opt_cfg.weight_decay = model.cfg.weight_decay;
    AdamW opt(model.params, opt_cfg);
    Rng rng(mix_seed(seed, 0xF17E70ULL));

    for (int e = 0; e < epochs; ++e) {
        std::vector<int> order(scenes.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        rng.shuffle(order);
        double total = 0.0;
        for (int idx : order) {
            const SceneTokens& scene = scenes[static_cast<std::size_t>(idx)];
            Tape tape;
            ModelForward fwd = seg_forward(tape, model, scene);
            std::vector<int> labels = int_labels(scene, model.cfg.n_classes);
            Tensor probs = softmax_last(tape, fwd.point_logits);
            Tensor loss = seg_cross_entropy(tape, probs, labels);
            if (fwd.balance_sum.defined())
                loss = add(tape, loss,
                           scale(tape, fwd.balance_sum, model.cfg.lambda_balance));
            opt.zero_grad();
            tape.backward(loss);
            opt.step();
            model.renormalize_class_embeddings();
            total += loss.scalar();
        }
        result.epoch_losses.push_back(scenes.empty() ? 0.0 : total / scenes.size());
        if (verbose)
            std::fprintf(stderr, "finetune epoch %d/%d loss %.6f\n", e + 1, epochs,
                         result.epoch_losses.back());
    }

    result.final_report = evaluate(model, corpus, eopt);
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        save_seg_checkpoint(model, out_dir + "/checkpoint.ckpt");
        save_report(result.zero_shot, out_dir + "/zero_shot.json");
        save_report(result.final_report, out_dir + "/report.json");
    }
    return result;
}

BenchResult bench(SegModel& model, const CorpusManifest& corpus, const std::string& split,
                  int timed_passes) {
    BenchResult result;

    std::int64_t non_expert = 0;
    for (const auto& [name, t] : model.params.entries())
        if (name.find(".expert") == std::string::npos) non_expert += t.numel();
    std::vector<std::int64_t> expert_params(model.moe.size(), 0);
    for (std::size_t l = 0; l < model.moe.size(); ++l) {
        const FfnParams& f = model.moe[l].layer.bank.do_experts[0];
        expert_params[l] = f.up.weight.numel() + f.up.bias.numel() + f.down.weight.numel() +
                           f.down.bias.numel();
    }

    // Mean activated expert count per layer over the split.
    std::vector<double> k_sum(model.moe.size(), 0.0);
    std::vector<std::int64_t> tokens(model.moe.size(), 0);
    std::int64_t n_scenes = 0;
    for (int id : model.domain_ids) {
        const SplitRange& range = corpus.split(id, split);
        for (int i = 0; i < range.count; ++i, ++n_scenes) {
            PointCloud cloud = generate_scene(corpus.domain(id).spec,
                                              range.seed_base + static_cast<std::uint64_t>(i));
            SceneTokens scene = build_scene_tokens(cloud, model.cfg.backbone_config());
            Tape tape;
            ModelForward fwd = seg_forward(tape, model, scene);
            for (std::size_t l = 0; l < model.moe.size(); ++l) {
                const MoePoint& mp = model.moe[l];
                const std::int64_t stage_tokens =
                    scene.grids[static_cast<std::size_t>(mp.stage)].rows();
                if (!mp.routed) {
                    // Single Do expert, always active.
                    tokens[l] += stage_tokens;
                    k_sum[l] += static_cast<double>(stage_tokens);
                    continue;
                }
                for (const LayerForward& lf : fwd.moe) {
                    if (lf.stage != mp.stage || lf.block != mp.block) continue;
                    tokens[l] += static_cast<std::int64_t>(lf.decision.k.size());
                    for (int k : lf.decision.k) k_sum[l] += k;
                }
            }
        }
    }

    double expert_contrib = 0.0;
    double k_total = 0.0;
    std::int64_t token_total = 0;
    for (std::size_t l = 0; l < model.moe.size(); ++l) {
        const double mean_k =
            tokens[l] > 0 ? k_sum[l] / static_cast<double>(tokens[l]) : 0.0;
        expert_contrib += mean_k * static_cast<double>(expert_params[l]);
        k_total += k_sum[l];
        token_total += tokens[l];
    }
    result.mean_active_k = token_total > 0 ? k_total / static_cast<double>(token_total) : 0.0;
    result.activated_params = non_expert + static_cast<std::int64_t>(std::llround(expert_contrib));

    EvalOptions eopt;
    eopt.split = split;
    eopt.threads = 2;
    std::vector<double> times;
    for (int p = 0; p < timed_passes; ++p) {
        const auto start = std::chrono::steady_clock::now();
        MetricsReport r = evaluate(model, corpus, eopt);
        const auto end = std::chrono::steady_clock::now();
        (void)r;
        times.push_back(std::chrono::duration<double>(end - start).count());
    }
    std::sort(times.begin(), times.end());
    const double median = times[times.size() / 2];
    result.throughput_scenes_per_s = median > 0.0 ? n_scenes / median : 0.0;
    return result;
}

std::vector<AblationRow> run_ablation(const TrainConfig& base, const CorpusManifest& corpus,
                                      const std::vector<std::string>& rows,
                                      const std::vector<std::uint64_t>& seeds,
                                      const std::string& out_dir, bool verbose,
                                      int parallel_jobs) {
    struct Job {
        std::string row;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (const auto& row : rows)
        for (std::uint64_t s : seeds) jobs.push_back({row, s});
    std::vector<AblationRow> results(jobs.size());

    std::exception_ptr error;
    std::mutex error_mutex;
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        try {
            while (true) {
                const std::size_t i = next.fetch_add(1);
                if (i >= jobs.size()) break;
                TrainConfig cfg = apply_grid_row(base, jobs[i].row);
                cfg.seed = jobs[i].seed;
                cfg.grid_rows.clear();
                cfg.grid_seeds.clear();
                SegModel model = make_seg_model(cfg, corpus, cfg.seed);
                std::string job_dir;
                if (!out_dir.empty())
                    job_dir = out_dir + "/" + jobs[i].row + "_seed" + std::to_string(jobs[i].seed);
                JointTrainResult r = joint_train(cfg, corpus, model, job_dir, verbose);
                results[i] = AblationRow{jobs[i].row, jobs[i].seed, r.eval_report};
            }
        } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!error) error = std::current_exception();
        }
    };
    const int workers = std::max(1, std::min<int>(parallel_jobs, static_cast<int>(jobs.size())));
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < workers; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    if (error) std::rethrow_exception(error);
    return results;
}

}  // namespace doremi
