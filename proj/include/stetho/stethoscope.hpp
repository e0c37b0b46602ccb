#pragma once

#include <functional>
#include <map>
#include <random>
#include <string>

#include "stetho/graph.hpp"
#include "stetho/optim.hpp"
#include "stetho/tensor.hpp"

namespace stetho::scope {

using ad::Graph;
using ad::NodeId;
using ad::ParameterSet;
using ad::Partition;

// ---------------------------------------------------------------------------
// Sparse input adapter
//
// A fixed random connection pattern reducing a flattened activation of any
// width to a constant-capacity vector: x' = M x + b, where M has exactly
// n_non_zero trainable entries, every input column is connected at least
// once and every output row is connected exactly n_non_zero/out_dim times.

struct SparseConnector {
  int in_dim = 0;
  int out_dim = 0;
  int n_non_zero = 0;
  ad::SparsePatternPtr pattern;
};

/// Deterministic pattern from a shuffled round-robin column assignment.
/// Requires n_non_zero % out_dim == 0, n_non_zero >= in_dim and
/// n_non_zero <= in_dim*out_dim; throws a configuration error otherwise.
SparseConnector build_sparse_pattern(int in_dim, int out_dim, int n_non_zero, uint64_t seed);

/// x: [batch x in_dim] -> [batch x out_dim], weights and biases trainable.
NodeId connector_apply(Graph& g, ParameterSet& params, const SparseConnector& conn,
                       const std::string& prefix, NodeId x);

// ---------------------------------------------------------------------------
// Heads

enum class AdapterKind { Sparse, Dense };
enum class Mode { Analytic, Auxiliary, Adversarial };

inline Mode mode_of(double lambda) {
  if (lambda == 0.0) return Mode::Analytic;
  return lambda > 0.0 ? Mode::Auxiliary : Mode::Adversarial;
}

struct TaskSpec {
  bool binary = true;  // sigmoid vs softmax cross-entropy
  int arity = 1;       // logits per sample (1 for binary, K for n-way)
};

struct HeadSpec {
  double lambda = 0.0;
  TaskSpec task;
  int hidden_width = 256;
  int n_non_zero = 0;  // 0: smallest multiple of hidden_width covering the tap
  AdapterKind adapter = AdapterKind::Sparse;
  std::string prefix = "steth";
};

/// A two-layer ReLU perceptron reading one tapped activation, optionally
/// through the sparse adapter. Created detached; attach() binds it to a layer
/// and registers its parameters (all in Partition::Stethoscope).
struct StethoscopeHead {
  HeadSpec spec;
  bool attached = false;
  std::string layer_id;
  int tap_dim = 0;
  SparseConnector connector;  // populated for the sparse adapter

  Mode mode() const { return mode_of(spec.lambda); }
};

/// Binds `head` to a layer of a network described by its flattened tap widths.
/// Errors: unknown layer id, re-attachment, sparse capacity below the tap.
void attach(StethoscopeHead& head, const std::map<std::string, int>& tap_dims,
            const std::string& layer_id, ParameterSet& params, std::mt19937_64& init_rng);

/// Emits head logits reading the tapped node. `stop_input` detaches the tap
/// so no gradient reaches the host network (analytic mode and frozen hosts).
NodeId apply_head(Graph& g, ParameterSet& params, const StethoscopeHead& head, NodeId tap,
                  bool stop_input);

// ---------------------------------------------------------------------------
// Losses and the training step

/// 1 - y elementwise; rejects anything outside {0,1}.
Tensor flip_labels(const Tensor& labels);

/// Loss driving the host network. lambda >= 0: main + lambda*steth.
/// lambda < 0: main + |lambda|*flipped, where `loss_steth_flipped` is the
/// stethoscope loss under complemented targets (confusion form, not a
/// literal negation). With lambda == 0 this returns `loss_main` itself.
NodeId combined_loss(Graph& g, NodeId loss_main, NodeId loss_steth, NodeId loss_steth_flipped,
                     double lambda);

struct BuiltNet {
  NodeId logits = ad::kNoNode;
  std::map<std::string, NodeId> taps;
  bool main_binary = true;
};

struct Batch {
  std::map<std::string, Tensor> inputs;
  Tensor y_main;        // [B] binary labels or [B,K] one-hot rows
  Tensor s_target;      // stethoscope targets, same conventions
  Tensor main_weights;  // optional 0/1 per-sample weights for the main loss
};

using NetBuilder = std::function<BuiltNet(Graph&, ParameterSet&, const Batch&)>;

struct StepResult {
  double loss_main = 0;
  double loss_steth = 0;
  double loss_combined = 0;
};

/// One simultaneous update from a single forward pass: the host parameters
/// follow the combined loss (with the tap detached in analytic mode), the
/// head parameters always follow the plain stethoscope loss. Pass a null
/// head for a stethoscope-free baseline step.
StepResult stethoscope_step(const NetBuilder& build, ParameterSet& params, StethoscopeHead* head,
                            const Batch& batch, opt::RmsProp& opt_theta, opt::RmsProp* opt_psi);

/// Head-only update against a frozen host: the tap is detached and only the
/// head parameters move. The builder may omit the decoder.
StepResult probe_step(const NetBuilder& build, ParameterSet& params, StethoscopeHead& head,
                      const Batch& batch, opt::RmsProp& opt_psi);

/// Stethoscope loss node for the current batch; exposed for evaluation code.
NodeId steth_loss_node(Graph& g, const StethoscopeHead& head, NodeId head_logits,
                       const Tensor& s_target, bool flipped);

}  // namespace stetho::scope
