#include "doremi/moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace doremi {

int eda_expert_count(double entropy, int num_experts, int k_min, int k_max) {
    if (num_experts < 2) throw ConfigError("expert count must be at least 2 for allocation");
    if (k_min < 1 || k_min > k_max || k_max > num_experts)
        throw ConfigError("allocation bounds must satisfy 1 <= k_min <= k_max <= K");
    const double h_max = std::log(static_cast<double>(num_experts));
    const double h = std::clamp(entropy, 0.0, h_max);
    const double raw = k_min + (h / h_max) * static_cast<double>(k_max - k_min);
    const int k = static_cast<int>(std::ceil(raw));
    return std::clamp(k, k_min, k_max);
}

RoutingDecision eda_allocate(Tape& tape, const Tensor& logits, int k_min, int k_max) {
    const int K = logits.cols();
    const int n = logits.rows();
    if (K < 2) throw ConfigError("eda_allocate requires K >= 2");
    if (k_min < 1 || k_min > k_max || k_max > K)
        throw ConfigError("allocation bounds must satisfy 1 <= k_min <= k_max <= K");

    RoutingDecision d;
    d.logits = logits;
    d.num_experts = K;
    d.k_min = k_min;
    d.k_max = k_max;
    d.probs = softmax_last(tape, logits);

    const double h_max = std::log(static_cast<double>(K));
    d.entropy.resize(static_cast<std::size_t>(n));
    d.k.resize(static_cast<std::size_t>(n));
    d.active.resize(static_cast<std::size_t>(n));

    std::vector<double> mask(static_cast<std::size_t>(n) * K, 0.0);
    std::vector<int> order(static_cast<std::size_t>(K));
    const double* pv = d.probs.values().data();
    for (int i = 0; i < n; ++i) {
        const double* row = pv + static_cast<std::size_t>(i) * K;
        double h = 0.0;
        for (int j = 0; j < K; ++j)
            if (row[j] > 0.0) h -= row[j] * std::log(row[j]);
        h = std::clamp(h, 0.0, h_max);
        d.entropy[static_cast<std::size_t>(i)] = h;
        const int k = eda_expert_count(h, K, k_min, k_max);
        d.k[static_cast<std::size_t>(i)] = k;

        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            if (row[a] != row[b]) return row[a] > row[b];
            return a < b;  // ties toward the lowest expert index
        });
        auto& act = d.active[static_cast<std::size_t>(i)];
        act.assign(order.begin(), order.begin() + k);
        std::sort(act.begin(), act.end());
        for (int j : act) mask[static_cast<std::size_t>(i) * K + j] = 1.0;
    }

    Tensor mask_tensor = Tensor::from_data({n, K}, std::move(mask), false);
    d.weights = mul(tape, d.probs, mask_tensor);
    return d;
}

Tensor balance_loss(Tape& tape, const RoutingDecision& decision, BalanceStats* stats) {
    const int K = decision.num_experts;
    const int n = decision.probs.rows();
    if (n < 1) throw ConfigError("balance_loss needs at least one token");

    std::vector<double> c(static_cast<std::size_t>(K), 0.0);
    for (const auto& act : decision.active)
        for (int j : act) c[static_cast<std::size_t>(j)] += 1.0;
    for (auto& v : c) v /= n;

    // K * sum_j c_j r_j == (K / N) * sum_ij c_j p_ij with c constant.
    std::vector<double> cb(static_cast<std::size_t>(n) * K);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < K; ++j) cb[static_cast<std::size_t>(i) * K + j] = c[static_cast<std::size_t>(j)];
    Tensor c_bcast = Tensor::from_data({n, K}, std::move(cb), false);
    Tensor loss = scale(tape, sum(tape, mul(tape, decision.probs, c_bcast)),
                        static_cast<double>(K) / n);

    if (stats) {
        stats->c = c;
        stats->r.assign(static_cast<std::size_t>(K), 0.0);
        const double* pv = decision.probs.values().data();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < K; ++j) stats->r[static_cast<std::size_t>(j)] += pv[static_cast<std::size_t>(i) * K + j];
        for (auto& v : stats->r) v /= n;
        stats->loss = loss.scalar();
    }
    return loss;
}

Tensor expert_mix(Tape& tape, const Tensor& feats, const ExpertBank& bank,
                  const RoutingDecision& decision) {
    const int n = feats.rows();
    const int d = feats.cols();
    const int K = bank.num_experts();
    if (decision.num_experts != K)
        throw ConfigError("expert_mix: decision was produced for a different bank");
    if (decision.probs.rows() != n)
        throw ConfigError("expert_mix: decision was produced for different tokens");

    Tensor acc = Tensor::zeros({n, d}, false);
    for (int j = 0; j < K; ++j) {
        std::vector<int> idx;
        for (int i = 0; i < n; ++i) {
            const auto& act = decision.active[static_cast<std::size_t>(i)];
            if (std::binary_search(act.begin(), act.end(), j)) idx.push_back(i);
        }
        if (idx.empty()) continue;
        Tensor xg = gather_rows(tape, feats, idx);
        Tensor yj = ffn(tape, xg, bank.do_experts[static_cast<std::size_t>(j)]);
        Tensor wcol = column(tape, decision.weights, j);
        Tensor wj = gather_rows(tape, wcol, idx);
        Tensor scaled = rows_scale(tape, yj, wj);
        acc = scatter_add_rows(tape, acc, scaled, idx);
    }
    return acc;
}

Tensor expert_mix_dense(Tape& tape, const Tensor& feats, const ExpertBank& bank,
                        const RoutingDecision& decision) {
    const int K = bank.num_experts();
    Tensor acc = Tensor::zeros({feats.rows(), feats.cols()}, false);
    for (int j = 0; j < K; ++j) {
        Tensor yj = ffn(tape, feats, bank.do_experts[static_cast<std::size_t>(j)]);
        Tensor wj = column(tape, decision.weights, j);
        acc = add(tape, acc, rows_scale(tape, yj, wj));
    }
    return acc;
}

Tensor fuse(Tape& tape, const Tensor& feats, const ExpertBank& bank,
            const RoutingDecision& decision) {
    Tensor f_do = expert_mix(tape, feats, bank, decision);
    Tensor f_re = ffn(tape, feats, bank.re_expert);
    return add(tape, f_do, f_re);
}

int DomainEmbeddingTable::row_of(int domain_id) const {
    for (std::size_t i = 0; i < domain_ids.size(); ++i)
        if (domain_ids[i] == domain_id) return static_cast<int>(i);
    return -1;
}

Tensor domain_vector(Tape& tape, const DomainEmbeddingTable& table, int domain_id) {
    const int row = table.row_of(domain_id);
    if (row < 0)
        throw ConfigError("unknown domain id " + std::to_string(domain_id) +
                          " outside averaged-unseen mode");
    Tensor d = gather_rows(tape, table.embeddings, {row});
    return mlp(tape, d, table.projection);
}

Tensor unseen_domain_vector(Tape& tape, const DomainEmbeddingTable& table,
                            const std::vector<int>& rows) {
    if (rows.empty()) throw ConfigError("unseen-domain embedding needs at least one row");
    Tensor gathered = gather_rows(tape, table.embeddings, rows);
    // Mean in embedding space, then the shared projection.
    std::vector<double> w(rows.size(), 1.0 / static_cast<double>(rows.size()));
    Tensor weights = Tensor::from_data({1, static_cast<int>(rows.size())}, std::move(w), false);
    Tensor mean_d = matmul(tape, weights, gathered);
    return mlp(tape, mean_d, table.projection);
}

Tensor routing_input(Tape& tape, const DoremiLayer& layer, const Tensor& feats,
                     const std::shared_ptr<ConvPlan>& plan, const Tensor& e_d) {
    Tensor spatial = submanifold_conv(tape, feats, plan, layer.dsr_conv);
    return broadcast_row_add(tape, spatial, e_d);
}

LayerForward doremi_layer_forward(Tape& tape, const DoremiLayer& layer, const Tensor& feats,
                                  const std::shared_ptr<ConvPlan>& plan, const Tensor& e_d) {
    LayerForward out;
    Tensor z = routing_input(tape, layer, feats, plan, e_d);
    Tensor g = mlp(tape, z, layer.gate);
    out.decision = eda_allocate(tape, g, layer.k_min, layer.k_max);
    out.balance = balance_loss(tape, out.decision, &out.stats);
    out.out = fuse(tape, feats, layer.bank, out.decision);
    return out;
}

DoremiLayer build_layer_from_pretrained(const FfnParams& pretrained, int num_experts, int width,
                                        int embed_dim, const Tensor& shared_embeddings,
                                        const std::vector<int>& domain_ids, Rng& rng) {
    if (pretrained.width() != width)
        throw ConfigError("pretrained FFN width does not match stage width");
    DoremiLayer layer;
    layer.dsr_conv = make_conv(width, width, 3, rng, true);
    layer.gate = make_mlp({width, width, num_experts}, rng, true);
    layer.table.embeddings = shared_embeddings;
    layer.table.domain_ids = domain_ids;
    layer.table.projection = make_mlp({embed_dim, width, width}, rng, true);
    for (int j = 0; j < num_experts; ++j)
        layer.bank.do_experts.push_back(clone_ffn(pretrained, true));
    layer.bank.re_expert = clone_ffn(pretrained, false);
    layer.k_min = 1;
    layer.k_max = num_experts;
    return layer;
}

}  // namespace doremi
