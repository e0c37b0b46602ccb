#include "stetho/stethoscope.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "stetho/layers.hpp"
#include "stetho/rng.hpp"

namespace stetho::scope {

namespace {

[[noreturn]] void cfg_error(const std::string& msg) {
  throw std::runtime_error("stethoscope config: " + msg);
}

}  // namespace

SparseConnector build_sparse_pattern(int in_dim, int out_dim, int n_non_zero, uint64_t seed) {
  if (in_dim <= 0) cfg_error("in_dim must be positive, got " + std::to_string(in_dim));
  if (out_dim <= 0) cfg_error("out_dim must be positive, got " + std::to_string(out_dim));
  if (n_non_zero <= 0) cfg_error("n_non_zero must be positive, got " + std::to_string(n_non_zero));
  if (n_non_zero % out_dim != 0)
    cfg_error("n_non_zero=" + std::to_string(n_non_zero) + " is not a multiple of out_dim=" +
              std::to_string(out_dim));
  if (n_non_zero < in_dim)
    cfg_error("n_non_zero=" + std::to_string(n_non_zero) + " below in_dim=" +
              std::to_string(in_dim) + "; every input must be connected");
  const int per_row = n_non_zero / out_dim;
  if (per_row > in_dim)
    cfg_error("n_non_zero/out_dim=" + std::to_string(per_row) + " exceeds in_dim=" +
              std::to_string(in_dim) + "; rows cannot hold distinct columns");

  // Column stream: concatenated shuffled permutations, so the first block
  // already covers every input. Dealt round-robin across rows.
  std::mt19937_64 rng = rng_stream(seed, "sparse_pattern");
  std::vector<int> stream;
  stream.reserve(static_cast<size_t>(n_non_zero) + static_cast<size_t>(in_dim));
  std::vector<int> perm(static_cast<size_t>(in_dim));
  std::iota(perm.begin(), perm.end(), 0);
  while (static_cast<int>(stream.size()) < n_non_zero) {
    std::shuffle(perm.begin(), perm.end(), rng);
    stream.insert(stream.end(), perm.begin(), perm.end());
  }
  stream.resize(static_cast<size_t>(n_non_zero));

  std::vector<std::vector<int>> rows(static_cast<size_t>(out_dim));
  for (int i = 0; i < n_non_zero; ++i) rows[static_cast<size_t>(i % out_dim)].push_back(stream[static_cast<size_t>(i)]);

  // A row may have picked the same column from two permutation blocks;
  // replace such repeats with the smallest column absent from the row. The
  // first occurrence stays, so column coverage is untouched.
  for (auto& row : rows) {
    std::set<int> seen;
    for (auto& c : row) {
      if (seen.insert(c).second) continue;
      int repl = 0;
      while (seen.count(repl)) ++repl;
      c = repl;
      seen.insert(repl);
    }
  }

  auto pattern = std::make_shared<std::vector<ad::SparseEntry>>();
  pattern->reserve(static_cast<size_t>(n_non_zero));
  for (int r = 0; r < out_dim; ++r)
    for (int c : rows[static_cast<size_t>(r)]) pattern->push_back({r, c});

  SparseConnector conn;
  conn.in_dim = in_dim;
  conn.out_dim = out_dim;
  conn.n_non_zero = n_non_zero;
  conn.pattern = std::move(pattern);
  return conn;
}

NodeId connector_apply(Graph& g, ParameterSet& params, const SparseConnector& conn,
                       const std::string& prefix, NodeId x) {
  NodeId w = g.param(params, prefix + "/conn/w");
  NodeId b = g.param(params, prefix + "/conn/b");
  return g.sparse_affine(x, w, b, conn.pattern, conn.out_dim);
}

void attach(StethoscopeHead& head, const std::map<std::string, int>& tap_dims,
            const std::string& layer_id, ParameterSet& params, std::mt19937_64& init_rng) {
  if (head.attached)
    cfg_error("head already attached to layer '" + head.layer_id + "'; one tap per head");
  auto it = tap_dims.find(layer_id);
  if (it == tap_dims.end()) {
    std::string known;
    for (const auto& [k, v] : tap_dims) known += (known.empty() ? "" : ", ") + k;
    cfg_error("unknown layer id '" + layer_id + "' (known: " + known + ")");
  }
  const int tap_dim = it->second;
  const HeadSpec& spec = head.spec;
  if (spec.hidden_width <= 0) cfg_error("hidden_width must be positive");
  if (spec.task.arity <= 0) cfg_error("task arity must be positive");

  int hidden_in = tap_dim;
  if (spec.adapter == AdapterKind::Sparse) {
    int nnz = spec.n_non_zero;
    if (nnz == 0)
      nnz = ((tap_dim + spec.hidden_width - 1) / spec.hidden_width) * spec.hidden_width;
    if (nnz < tap_dim)
      cfg_error("n_non_zero=" + std::to_string(nnz) + " below flattened tap width " +
                std::to_string(tap_dim) + " of layer '" + layer_id + "'");
    head.connector =
        build_sparse_pattern(tap_dim, spec.hidden_width, nnz, init_rng());
    hidden_in = head.connector.out_dim;
    int fan_in = head.connector.n_non_zero / head.connector.out_dim;
    Tensor w({head.connector.n_non_zero});
    double sigma = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : w.data) v = truncated_normal(init_rng, sigma);
    params.add(spec.prefix + "/conn/w", std::move(w), Partition::Stethoscope);
    params.add(spec.prefix + "/conn/b", Tensor({head.connector.out_dim}), Partition::Stethoscope);
  }
  nn::add_dense_params(params, spec.prefix + "/hid",
                       {hidden_in, spec.hidden_width, nn::Activation::Relu},
                       Partition::Stethoscope, init_rng);
  nn::add_dense_params(params, spec.prefix + "/out",
                       {spec.hidden_width, spec.task.arity, nn::Activation::None},
                       Partition::Stethoscope, init_rng);

  head.attached = true;
  head.layer_id = layer_id;
  head.tap_dim = tap_dim;
}

NodeId apply_head(Graph& g, ParameterSet& params, const StethoscopeHead& head, NodeId tap,
                  bool stop_input) {
  if (!head.attached) cfg_error("apply_head on a detached head");
  NodeId x = stop_input ? g.stop_gradient(tap) : tap;
  if (g.shape(x).size() != 2) x = g.flatten(x);
  if (g.shape(x)[1] != head.tap_dim)
    cfg_error("tap width " + std::to_string(g.shape(x)[1]) + " does not match attachment " +
              std::to_string(head.tap_dim));
  const HeadSpec& spec = head.spec;
  if (spec.adapter == AdapterKind::Sparse)
    x = connector_apply(g, params, head.connector, spec.prefix, x);
  int hidden_in = spec.adapter == AdapterKind::Sparse ? head.connector.out_dim : head.tap_dim;
  NodeId h = nn::dense_forward(g, params, spec.prefix + "/hid",
                               {hidden_in, spec.hidden_width, nn::Activation::Relu}, x);
  return nn::dense_forward(g, params, spec.prefix + "/out",
                           {spec.hidden_width, spec.task.arity, nn::Activation::None}, h);
}

Tensor flip_labels(const Tensor& labels) {
  Tensor out(labels.shape);
  for (int64_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0.0 && labels[i] != 1.0)
      throw std::runtime_error("flip_labels: entry " + std::to_string(i) + " = " +
                               std::to_string(labels[i]) + " is not binary");
    out[i] = 1.0 - labels[i];
  }
  return out;
}

NodeId combined_loss(Graph& g, NodeId loss_main, NodeId loss_steth, NodeId loss_steth_flipped,
                     double lambda) {
  if (lambda == 0.0) return loss_main;
  if (lambda > 0.0) return g.add_scaled(loss_main, loss_steth, lambda);
  if (loss_steth_flipped == ad::kNoNode)
    cfg_error("adversarial combined loss requires the flipped stethoscope loss");
  return g.add_scaled(loss_main, loss_steth_flipped, -lambda);
}

NodeId steth_loss_node(Graph& g, const StethoscopeHead& head, NodeId head_logits,
                       const Tensor& s_target, bool flipped) {
  if (head.spec.task.binary) {
    if (flipped) return g.sigmoid_ce(head_logits, g.constant(flip_labels(s_target)));
    return g.sigmoid_ce(head_logits, g.constant(s_target));
  }
  if (flipped) return g.softmax_ce_uniform(head_logits);
  return g.softmax_ce(head_logits, g.constant(s_target));
}

namespace {

NodeId main_loss_node(Graph& g, const BuiltNet& net, const Batch& batch) {
  NodeId logits = net.logits;
  const Tensor* w = batch.main_weights.size() > 0 ? &batch.main_weights : nullptr;
  if (net.main_binary) return nn::sigmoid_ce_loss(g, logits, batch.y_main, w);
  return nn::softmax_ce_loss(g, logits, batch.y_main, w);
}

std::map<std::string, Tensor> host_grads(const Graph& g, const ParameterSet& params) {
  auto grads = g.param_grads(params, Partition::Encoder);
  auto dec = g.param_grads(params, Partition::Decoder);
  grads.insert(std::make_move_iterator(dec.begin()), std::make_move_iterator(dec.end()));
  return grads;
}

}  // namespace

StepResult stethoscope_step(const NetBuilder& build, ParameterSet& params, StethoscopeHead* head,
                            const Batch& batch, opt::RmsProp& opt_theta, opt::RmsProp* opt_psi) {
  Graph g;
  BuiltNet net = build(g, params, batch);
  NodeId loss_main = main_loss_node(g, net, batch);

  NodeId loss_s = ad::kNoNode, loss_sbar = ad::kNoNode, total = loss_main;
  if (head) {
    if (!head->attached) cfg_error("stethoscope_step with a detached head");
    if (batch.s_target.size() == 0)
      throw std::runtime_error("stethoscope_step: batch carries no stethoscope targets");
    auto tap_it = net.taps.find(head->layer_id);
    if (tap_it == net.taps.end())
      cfg_error("built network exposes no tap '" + head->layer_id + "'");
    const double lambda = head->spec.lambda;
    NodeId head_logits = apply_head(g, params, *head, tap_it->second, lambda == 0.0);
    loss_s = steth_loss_node(g, *head, head_logits, batch.s_target, false);
    if (lambda < 0.0) loss_sbar = steth_loss_node(g, *head, head_logits, batch.s_target, true);
    total = combined_loss(g, loss_main, loss_s, loss_sbar, lambda);
  }

  g.forward({});

  StepResult res;
  res.loss_main = g.value(loss_main).scalar_value();
  res.loss_combined = g.value(total).scalar_value();

  g.backward(total);
  auto theta_grads = host_grads(g, params);

  std::map<std::string, Tensor> psi_grads;
  if (head) {
    res.loss_steth = g.value(loss_s).scalar_value();
    g.backward(loss_s);
    psi_grads = g.param_grads(params, Partition::Stethoscope);
  }

  // both gradients came from the same forward pass; apply together
  opt_theta.step(params, theta_grads);
  if (head) {
    if (!opt_psi) cfg_error("stethoscope_step needs an optimizer for the head");
    opt_psi->step(params, psi_grads);
  }
  return res;
}

StepResult probe_step(const NetBuilder& build, ParameterSet& params, StethoscopeHead& head,
                      const Batch& batch, opt::RmsProp& opt_psi) {
  if (!head.attached) cfg_error("probe_step with a detached head");
  if (batch.s_target.size() == 0)
    throw std::runtime_error("probe_step: batch carries no stethoscope targets");
  Graph g;
  BuiltNet net = build(g, params, batch);
  auto tap_it = net.taps.find(head.layer_id);
  if (tap_it == net.taps.end()) cfg_error("built network exposes no tap '" + head.layer_id + "'");
  NodeId head_logits = apply_head(g, params, head, tap_it->second, true);
  NodeId loss_s = steth_loss_node(g, head, head_logits, batch.s_target, false);
  g.forward({});
  g.backward(loss_s);
  StepResult res;
  res.loss_steth = res.loss_combined = g.value(loss_s).scalar_value();
  opt_psi.step(params, g.param_grads(params, Partition::Stethoscope));
  return res;
}

}  // namespace stetho::scope
