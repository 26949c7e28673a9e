#pragma once

#include "doremi/backbone.hpp"
#include "doremi/checkpoint.hpp"

namespace doremi {

// Ceil-mapped expert count for one entropy value; H is clamped to
// [0, ln K] before mapping.
int eda_expert_count(double entropy, int num_experts, int k_min, int k_max);

// Per-token routing outputs. probs rows sum to one; weights equal probs on
// the active set and zero elsewhere (no renormalization).
struct RoutingDecision {
    Tensor logits;   // g [N x K]
    Tensor probs;    // p [N x K]
    Tensor weights;  // w [N x K]
    std::vector<double> entropy;           // nats, in [0, ln K]
    std::vector<int> k;                    // in [k_min, k_max]
    std::vector<std::vector<int>> active;  // ascending expert ids, |active[i]| == k[i]
    int num_experts = 0;
    int k_min = 1;
    int k_max = 1;
};

// Softmax, Shannon entropy, entropy-to-k ceiling map, and top-k selection
// with ties broken toward the lowest expert index. Pass k_min == k_max for
// fixed top-k routing.
RoutingDecision eda_allocate(Tape& tape, const Tensor& logits, int k_min, int k_max);

struct BalanceStats {
    std::vector<double> c;  // routed-token fraction per expert
    std::vector<double> r;  // mean probability per expert
    double loss = 0.0;
};

// K * sum_j c_j * r_j; gradient flows through r only.
Tensor balance_loss(Tape& tape, const RoutingDecision& decision, BalanceStats* stats = nullptr);

struct ExpertBank {
    std::vector<FfnParams> do_experts;  // trainable
    FfnParams re_expert;                // frozen
    int num_experts() const { return static_cast<int>(do_experts.size()); }
};

// Sparse dispatch: each expert runs only on the tokens that activated it,
// outputs scaled by w and scattered back. Experts consume the original
// features, not the routing input.
Tensor expert_mix(Tape& tape, const Tensor& feats, const ExpertBank& bank,
                  const RoutingDecision& decision);
// Test oracle path: every expert over every token, masked by w.
Tensor expert_mix_dense(Tape& tape, const Tensor& feats, const ExpertBank& bank,
                        const RoutingDecision& decision);

// expert_mix + frozen Re branch.
Tensor fuse(Tape& tape, const Tensor& feats, const ExpertBank& bank,
            const RoutingDecision& decision);

// Learnable per-dataset embedding rows plus a projection to feature width.
// The embeddings tensor may be shared between layers at different widths;
// each table owns its projection.
struct DomainEmbeddingTable {
    Tensor embeddings;            // [n_domains x embed_dim]
    std::vector<int> domain_ids;  // row order
    MlpParams projection;         // embed_dim -> D

    int row_of(int domain_id) const;
};

// Projected e_d for a known domain; throws ConfigError for unknown ids.
Tensor domain_vector(Tape& tape, const DomainEmbeddingTable& table, int domain_id);
// Unseen-domain protocol: mean of the listed rows in embedding space, then
// the same projection.
Tensor unseen_domain_vector(Tape& tape, const DomainEmbeddingTable& table,
                            const std::vector<int>& rows);

// One DoReMi insertion point: routing conv + gate over z = f' + e_d, the
// expert bank, and this layer's domain projection.
struct DoremiLayer {
    SparseConvKernel dsr_conv;  // D -> D
    MlpParams gate;             // D -> D -> K
    DomainEmbeddingTable table;
    ExpertBank bank;
    int stage = 0;
    int block = 0;
    int k_min = 1;
    int k_max = 1;
};

// z = f' + e_d: routing input from spatial context plus the domain
// embedding broadcast over tokens.
Tensor routing_input(Tape& tape, const DoremiLayer& layer, const Tensor& feats,
                     const std::shared_ptr<ConvPlan>& plan, const Tensor& e_d);

struct LayerForward {
    Tensor out;  // f_do + f_re
    RoutingDecision decision;
    BalanceStats stats;
    Tensor balance;  // scalar
    int stage = 0;
    int block = 0;
};

LayerForward doremi_layer_forward(Tape& tape, const DoremiLayer& layer, const Tensor& feats,
                                  const std::shared_ptr<ConvPlan>& plan, const Tensor& e_d);

// K + 1 identical copies of the pretrained FFN (Re frozen), a randomly
// initialized gate and domain projection, and Normal(0, 0.02) domain
// embeddings.
DoremiLayer build_layer_from_pretrained(const FfnParams& pretrained, int num_experts, int width,
                                        int embed_dim, const Tensor& shared_embeddings,
                                        const std::vector<int>& domain_ids, Rng& rng);

}  // namespace doremi
