#include "stetho/graph.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace stetho::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error("graph: " + msg); }

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

uint64_t fnv1a(uint64_t h, const void* data, size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

struct ConvDims {
  int batch, in_ch, in_h, in_w;
  int out_ch, kh, kw, stride;
  int out_h, out_w;
  int pad_top, pad_left;
  int patch() const { return in_ch * kh * kw; }
  int positions() const { return out_h * out_w; }
};

ConvDims conv_dims(const Shape& x, const Shape& k, int stride, Padding pad) {
  ConvDims d{};
  d.batch = x[0];
  d.in_ch = x[1];
  d.in_h = x[2];
  d.in_w = x[3];
  d.out_ch = k[0];
  d.kh = k[2];
  d.kw = k[3];
  d.stride = stride;
  if (pad == Padding::Valid) {
    if (d.kh > d.in_h || d.kw > d.in_w)
      fail("conv2d: kernel " + std::to_string(d.kh) + "x" + std::to_string(d.kw) +
           " larger than input " + std::to_string(d.in_h) + "x" + std::to_string(d.in_w));
    d.out_h = (d.in_h - d.kh) / stride + 1;
    d.out_w = (d.in_w - d.kw) / stride + 1;
    d.pad_top = 0;
    d.pad_left = 0;
  } else {
    d.out_h = (d.in_h + stride - 1) / stride;
    d.out_w = (d.in_w + stride - 1) / stride;
    int pad_h = std::max((d.out_h - 1) * stride + d.kh - d.in_h, 0);
    int pad_w = std::max((d.out_w - 1) * stride + d.kw - d.in_w, 0);
    d.pad_top = pad_h / 2;
    d.pad_left = pad_w / 2;
  }
  return d;
}

void im2col(const Tensor& x, const ConvDims& d, Tensor& cols) {
  const int patch = d.patch(), pos = d.positions();
  double* out = cols.ptr();
  for (int b = 0; b < d.batch; ++b) {
    const double* xb = x.ptr() + static_cast<int64_t>(b) * d.in_ch * d.in_h * d.in_w;
    for (int oh = 0; oh < d.out_h; ++oh) {
      for (int ow = 0; ow < d.out_w; ++ow) {
        double* row = out + (static_cast<int64_t>(b) * pos + oh * d.out_w + ow) * patch;
        for (int c = 0; c < d.in_ch; ++c) {
          const double* xc = xb + static_cast<int64_t>(c) * d.in_h * d.in_w;
          for (int kh = 0; kh < d.kh; ++kh) {
            int ih = oh * d.stride - d.pad_top + kh;
            for (int kw = 0; kw < d.kw; ++kw) {
              int iw = ow * d.stride - d.pad_left + kw;
              bool inside = ih >= 0 && ih < d.in_h && iw >= 0 && iw < d.in_w;
              *row++ = inside ? xc[ih * d.in_w + iw] : 0.0;
            }
          }
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// ParameterSet

Parameter& ParameterSet::add(const std::string& name, Tensor init, Partition p) {
  if (index_.count(name)) fail("duplicate parameter '" + name + "'");
  index_[name] = params_.size();
  order_.push_back(name);
  params_.push_back(Parameter{std::move(init), p});
  return params_.back();
}

Parameter& ParameterSet::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) fail("unknown parameter '" + name + "'");
  return params_[it->second];
}

const Parameter& ParameterSet::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) fail("unknown parameter '" + name + "'");
  return params_[it->second];
}

std::vector<std::string> ParameterSet::names_in(Partition p) const {
  std::vector<std::string> out;
  for (const auto& n : order_)
    if (at(n).partition == p) out.push_back(n);
  return out;
}

int64_t ParameterSet::scalar_count(Partition p) const {
  int64_t n = 0;
  for (const auto& name : order_)
    if (at(name).partition == p) n += at(name).value.size();
  return n;
}

uint64_t ParameterSet::digest() const {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& name : order_) {
    const auto& v = at(name).value;
    h = fnv1a(h, name.data(), name.size());
    h = fnv1a(h, v.ptr(), v.data.size() * sizeof(double));
  }
  return h;
}

uint64_t ParameterSet::digest(Partition p) const {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& name : order_) {
    if (at(name).partition != p) continue;
    const auto& v = at(name).value;
    h = fnv1a(h, name.data(), name.size());
    h = fnv1a(h, v.ptr(), v.data.size() * sizeof(double));
  }
  return h;
}

void ParameterSet::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail("cannot write '" + path + "'");
  f.write("STPM0001", 8);
  auto put_u32 = [&](uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
  put_u32(static_cast<uint32_t>(order_.size()));
  for (const auto& name : order_) {
    const auto& p = at(name);
    put_u32(static_cast<uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    char part = static_cast<char>(p.partition);
    f.write(&part, 1);
    put_u32(static_cast<uint32_t>(p.value.shape.size()));
    for (int d : p.value.shape) put_u32(static_cast<uint32_t>(d));
    f.write(reinterpret_cast<const char*>(p.value.ptr()),
            static_cast<std::streamsize>(p.value.data.size() * sizeof(double)));
  }
  if (!f) fail("write failed for '" + path + "'");
}

ParameterSet ParameterSet::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail("cannot read '" + path + "'");
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, "STPM0001", 8) != 0) fail("'" + path + "' is not a parameter file");
  auto get_u32 = [&]() {
    uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    return v;
  };
  ParameterSet out;
  uint32_t count = get_u32();
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t len = get_u32();
    std::string name(len, '\0');
    f.read(name.data(), len);
    char part;
    f.read(&part, 1);
    uint32_t rank = get_u32();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<int>(get_u32());
    Tensor t(shape);
    f.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!f) fail("truncated parameter file '" + path + "'");
    out.add(name, std::move(t), static_cast<Partition>(part));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Graph construction

NodeId Graph::add_node(Node n) {
  for (NodeId p : n.parents)
    if (p < 0 || p >= static_cast<NodeId>(nodes_.size()))
      fail("parent id " + std::to_string(p) + " out of range");
  if (n.op != Op::Placeholder && n.op != Op::Constant && n.op != Op::Param &&
      n.op != Op::StopGradient) {
    for (NodeId p : n.parents)
      if (nodes_[static_cast<size_t>(p)].requires_grad) n.requires_grad = true;
  }
  nodes_.push_back(std::move(n));
  forward_done_ = false;
  return static_cast<NodeId>(nodes_.size() - 1);
}

Node& Graph::node(NodeId id) {
  if (id < 0 || id >= static_cast<NodeId>(nodes_.size())) fail("bad node id " + std::to_string(id));
  return nodes_[static_cast<size_t>(id)];
}
const Node& Graph::node(NodeId id) const { return const_cast<Graph*>(this)->node(id); }

NodeId Graph::placeholder(Shape shape) {
  Node n{};
  n.op = Op::Placeholder;
  n.value = Tensor(std::move(shape));
  return add_node(std::move(n));
}

NodeId Graph::constant(Tensor value) {
  Node n{};
  n.op = Op::Constant;
  n.value = std::move(value);
  return add_node(std::move(n));
}

NodeId Graph::param(ParameterSet& params, const std::string& name) {
  auto it = param_nodes_.find(name);
  if (it != param_nodes_.end()) return it->second;
  Node n{};
  n.op = Op::Param;
  n.bound = &params.at(name).value;
  n.pname = name;
  n.value = Tensor(n.bound->shape);
  n.requires_grad = true;
  NodeId id = add_node(std::move(n));
  param_nodes_[name] = id;
  return id;
}

NodeId Graph::add(NodeId a, NodeId b) {
  if (shape(a) != shape(b))
    fail("add: shape mismatch " + shape_str(shape(a)) + " vs " + shape_str(shape(b)));
  Node n{};
  n.op = Op::Add;
  n.parents = {a, b};
  n.value = Tensor(shape(a));
  return add_node(std::move(n));
}

NodeId Graph::add_scaled(NodeId a, NodeId b, double c) {
  if (shape(a) != shape(b))
    fail("add_scaled: shape mismatch " + shape_str(shape(a)) + " vs " + shape_str(shape(b)));
  Node n{};
  n.op = Op::AddScaled;
  n.parents = {a, b};
  n.d0 = c;
  n.value = Tensor(shape(a));
  return add_node(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
  if (shape(a) != shape(b))
    fail("mul: shape mismatch " + shape_str(shape(a)) + " vs " + shape_str(shape(b)));
  Node n{};
  n.op = Op::Mul;
  n.parents = {a, b};
  n.value = Tensor(shape(a));
  return add_node(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const Shape &sa = shape(a), &sb = shape(b);
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    fail("matmul: incompatible shapes " + shape_str(sa) + " x " + shape_str(sb));
  Node n{};
  n.op = Op::MatMul;
  n.parents = {a, b};
  n.value = Tensor({sa[0], sb[1]});
  return add_node(std::move(n));
}

NodeId Graph::add_bias(NodeId x, NodeId bias) {
  const Shape &sx = shape(x), &sb = shape(bias);
  if (sx.size() != 2 || sb.size() != 1 || sb[0] != sx[1])
    fail("add_bias: shapes " + shape_str(sx) + " and " + shape_str(sb));
  Node n{};
  n.op = Op::AddBias;
  n.parents = {x, bias};
  n.value = Tensor(sx);
  return add_node(std::move(n));
}

NodeId Graph::scale_by_scalar(NodeId x, NodeId s) {
  if (numel(shape(s)) != 1) fail("scale_by_scalar: scale must have one element");
  Node n{};
  n.op = Op::ScaleByScalar;
  n.parents = {x, s};
  n.value = Tensor(shape(x));
  return add_node(std::move(n));
}

NodeId Graph::conv2d(NodeId x, NodeId kernels, NodeId bias, int stride, Padding pad) {
  const Shape &sx = shape(x), &sk = shape(kernels), &sb = shape(bias);
  if (sx.size() != 4) fail("conv2d: input must be [batch,ch,h,w], got " + shape_str(sx));
  if (sk.size() != 4) fail("conv2d: kernels must be [out,in,kh,kw], got " + shape_str(sk));
  if (sk[1] != sx[1])
    fail("conv2d: input channels " + std::to_string(sx[1]) + " vs kernel " + std::to_string(sk[1]));
  if (sb.size() != 1 || sb[0] != sk[0]) fail("conv2d: bias shape " + shape_str(sb));
  if (stride < 1) fail("conv2d: stride must be positive");
  ConvDims d = conv_dims(sx, sk, stride, pad);
  Node n{};
  n.op = Op::Conv2d;
  n.parents = {x, kernels, bias};
  n.i0 = stride;
  n.i1 = pad == Padding::Same ? 1 : 0;
  n.value = Tensor({d.batch, d.out_ch, d.out_h, d.out_w});
  return add_node(std::move(n));
}

NodeId Graph::relu(NodeId x) {
  Node n{};
  n.op = Op::Relu;
  n.parents = {x};
  n.value = Tensor(shape(x));
  return add_node(std::move(n));
}

NodeId Graph::leaky_relu(NodeId x, double slope) {
  Node n{};
  n.op = Op::LeakyRelu;
  n.parents = {x};
  n.d0 = slope;
  n.value = Tensor(shape(x));
  return add_node(std::move(n));
}

NodeId Graph::sigmoid(NodeId x) {
  Node n{};
  n.op = Op::Sigmoid;
  n.parents = {x};
  n.value = Tensor(shape(x));
  return add_node(std::move(n));
}

NodeId Graph::flatten(NodeId x) {
  const Shape& s = shape(x);
  if (s.empty()) fail("flatten: scalar input");
  int64_t rest = 1;
  for (size_t i = 1; i < s.size(); ++i) rest *= s[i];
  Node n{};
  n.op = Op::Flatten;
  n.parents = {x};
  n.value = Tensor({s[0], static_cast<int>(rest)});
  return add_node(std::move(n));
}

NodeId Graph::concat_cols(NodeId a, NodeId b) {
  const Shape &sa = shape(a), &sb = shape(b);
  if (sa.size() != 2 || sb.size() != 2 || sa[0] != sb[0])
    fail("concat_cols: shapes " + shape_str(sa) + " and " + shape_str(sb));
  Node n{};
  n.op = Op::ConcatCols;
  n.parents = {a, b};
  n.value = Tensor({sa[0], sa[1] + sb[1]});
  return add_node(std::move(n));
}

NodeId Graph::stop_gradient(NodeId x) {
  Node n{};
  n.op = Op::StopGradient;
  n.parents = {x};
  n.value = Tensor(shape(x));
  n.requires_grad = false;
  return add_node(std::move(n));
}

NodeId Graph::sparse_affine(NodeId x, NodeId weights, NodeId bias, SparsePatternPtr pattern,
                            int out_dim) {
  const Shape &sx = shape(x), &sw = shape(weights), &sb = shape(bias);
  if (sx.size() != 2) fail("sparse_affine: input must be [batch,in], got " + shape_str(sx));
  if (!pattern) fail("sparse_affine: null pattern");
  if (sw.size() != 1 || sw[0] != static_cast<int>(pattern->size()))
    fail("sparse_affine: weight count " + shape_str(sw) + " vs pattern size " +
         std::to_string(pattern->size()));
  if (sb.size() != 1 || sb[0] != out_dim) fail("sparse_affine: bias shape " + shape_str(sb));
  for (const auto& e : *pattern)
    if (e.col < 0 || e.col >= sx[1] || e.row < 0 || e.row >= out_dim)
      fail("sparse_affine: pattern entry (" + std::to_string(e.row) + "," + std::to_string(e.col) +
           ") outside " + std::to_string(out_dim) + "x" + std::to_string(sx[1]));
  Node n{};
  n.op = Op::SparseAffine;
  n.parents = {x, weights, bias};
  n.pattern = std::move(pattern);
  n.value = Tensor({sx[0], out_dim});
  return add_node(std::move(n));
}

NodeId Graph::sigmoid_ce(NodeId logits, NodeId labels, NodeId weights) {
  int64_t n_logit = numel(shape(logits));
  if (numel(shape(labels)) != n_logit)
    fail("sigmoid_ce: logits " + shape_str(shape(logits)) + " vs labels " +
         shape_str(shape(labels)));
  Node n{};
  n.op = Op::SigmoidCE;
  n.parents = {logits, labels};
  if (weights != kNoNode) {
    if (numel(shape(weights)) != n_logit) fail("sigmoid_ce: weight length mismatch");
    n.parents.push_back(weights);
  }
  n.value = Tensor::scalar(0.0);
  return add_node(std::move(n));
}

NodeId Graph::softmax_ce(NodeId logits, NodeId onehot, NodeId weights) {
  const Shape &sl = shape(logits), &so = shape(onehot);
  if (sl.size() != 2 || so != sl)
    fail("softmax_ce: logits " + shape_str(sl) + " vs targets " + shape_str(so));
  Node n{};
  n.op = Op::SoftmaxCE;
  n.parents = {logits, onehot};
  if (weights != kNoNode) {
    if (numel(shape(weights)) != sl[0]) fail("softmax_ce: weight length mismatch");
    n.parents.push_back(weights);
  }
  n.value = Tensor::scalar(0.0);
  return add_node(std::move(n));
}

NodeId Graph::softmax_ce_uniform(NodeId logits, NodeId weights) {
  const Shape& sl = shape(logits);
  if (sl.size() != 2) fail("softmax_ce_uniform: logits must be [batch,k]");
  Node n{};
  n.op = Op::SoftmaxCEUniform;
  n.parents = {logits};
  if (weights != kNoNode) {
    if (numel(shape(weights)) != sl[0]) fail("softmax_ce_uniform: weight length mismatch");
    n.parents.push_back(weights);
  }
  n.value = Tensor::scalar(0.0);
  return add_node(std::move(n));
}

// ---------------------------------------------------------------------------
// Forward

void Graph::forward(const std::vector<std::pair<NodeId, const Tensor*>>& feeds) {
  std::vector<const Tensor*> feed_for(nodes_.size(), nullptr);
  for (const auto& [id, t] : feeds) {
    const Node& n = node(id);
    if (n.op != Op::Placeholder) fail("feed target node " + std::to_string(id) + " is not a placeholder");
    if (!t) fail("null feed for node " + std::to_string(id));
    if (t->shape != n.value.shape)
      fail("feed for node " + std::to_string(id) + ": expected " + shape_str(n.value.shape) +
           ", got " + shape_str(t->shape));
    feed_for[static_cast<size_t>(id)] = t;
  }
  for (size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    if (n.op == Op::Placeholder) {
      if (!feed_for[i]) fail("missing feed for placeholder node " + std::to_string(i));
      n.value.data = feed_for[i]->data;
    } else if (n.op == Op::Param) {
      if (n.bound->shape != n.value.shape)
        fail("parameter '" + n.pname + "' changed shape after binding");
      n.value.data = n.bound->data;
    } else if (n.op != Op::Constant) {
      eval(n);
    }
  }
  forward_done_ = true;
}

void Graph::eval(Node& n) {
  auto& v = n.value;
  auto P = [&](int i) -> const Tensor& { return nodes_[static_cast<size_t>(n.parents[static_cast<size_t>(i)])].value; };
  switch (n.op) {
    case Op::Add: {
      const Tensor &a = P(0), &b = P(1);
      for (int64_t i = 0; i < v.size(); ++i) v[i] = a[i] + b[i];
      break;
    }
    case Op::AddScaled: {
      const Tensor &a = P(0), &b = P(1);
      for (int64_t i = 0; i < v.size(); ++i) v[i] = a[i] + n.d0 * b[i];
      break;
    }
    case Op::Mul: {
      const Tensor &a = P(0), &b = P(1);
      for (int64_t i = 0; i < v.size(); ++i) v[i] = a[i] * b[i];
      break;
    }
    case Op::MatMul: {
      const Tensor &a = P(0), &b = P(1);
      ConstMatMap A(a.ptr(), a.dim(0), a.dim(1)), B(b.ptr(), b.dim(0), b.dim(1));
      MatMap C(v.ptr(), v.dim(0), v.dim(1));
      C.noalias() = A * B;
      break;
    }
    case Op::AddBias: {
      const Tensor &x = P(0), &b = P(1);
      int rows = x.dim(0), cols = x.dim(1);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) v[i * cols + j] = x[i * cols + j] + b[j];
      break;
    }
    case Op::ScaleByScalar: {
      const Tensor& x = P(0);
      double s = P(1)[0];
      for (int64_t i = 0; i < v.size(); ++i) v[i] = x[i] * s;
      break;
    }
    case Op::Conv2d: {
      const Tensor &x = P(0), &k = P(1), &b = P(2);
      ConvDims d = conv_dims(x.shape, k.shape, n.i0, n.i1 ? Padding::Same : Padding::Valid);
      const int patch = d.patch(), pos = d.positions();
      n.scratch = Tensor({d.batch * pos, patch});
      im2col(x, d, n.scratch);
      RowMat y(static_cast<Eigen::Index>(d.batch) * pos, d.out_ch);
      ConstMatMap cols(n.scratch.ptr(), static_cast<Eigen::Index>(d.batch) * pos, patch);
      ConstMatMap km(k.ptr(), d.out_ch, patch);
      y.noalias() = cols * km.transpose();
      for (int bi = 0; bi < d.batch; ++bi)
        for (int oc = 0; oc < d.out_ch; ++oc) {
          double* out = v.ptr() + (static_cast<int64_t>(bi) * d.out_ch + oc) * pos;
          double bias = b[oc];
          for (int p = 0; p < pos; ++p) out[p] = y(static_cast<Eigen::Index>(bi) * pos + p, oc) + bias;
        }
      break;
    }
    case Op::Relu: {
      const Tensor& x = P(0);
      for (int64_t i = 0; i < v.size(); ++i) v[i] = x[i] > 0 ? x[i] : 0.0;
      break;
    }
    case Op::LeakyRelu: {
      const Tensor& x = P(0);
      for (int64_t i = 0; i < v.size(); ++i) v[i] = x[i] > 0 ? x[i] : n.d0 * x[i];
      break;
    }
    case Op::Sigmoid: {
      const Tensor& x = P(0);
      for (int64_t i = 0; i < v.size(); ++i) v[i] = stable_sigmoid(x[i]);
      break;
    }
    case Op::Flatten:
    case Op::StopGradient: {
      v.data = P(0).data;
      break;
    }
    case Op::ConcatCols: {
      const Tensor &a = P(0), &b = P(1);
      int rows = a.dim(0), ca = a.dim(1), cb = b.dim(1);
      for (int i = 0; i < rows; ++i) {
        std::memcpy(v.ptr() + static_cast<int64_t>(i) * (ca + cb), a.ptr() + static_cast<int64_t>(i) * ca,
                    sizeof(double) * static_cast<size_t>(ca));
        std::memcpy(v.ptr() + static_cast<int64_t>(i) * (ca + cb) + ca,
                    b.ptr() + static_cast<int64_t>(i) * cb, sizeof(double) * static_cast<size_t>(cb));
      }
      break;
    }
    case Op::SparseAffine: {
      const Tensor &x = P(0), &w = P(1), &b = P(2);
      int batch = x.dim(0), in = x.dim(1), out = v.dim(1);
      for (int i = 0; i < batch; ++i)
        for (int j = 0; j < out; ++j) v[static_cast<int64_t>(i) * out + j] = b[j];
      for (size_t e = 0; e < n.pattern->size(); ++e) {
        const auto& [row, col] = (*n.pattern)[e];
        double we = w[static_cast<int64_t>(e)];
        for (int i = 0; i < batch; ++i)
          v[static_cast<int64_t>(i) * out + row] += we * x[static_cast<int64_t>(i) * in + col];
      }
      break;
    }
    case Op::SigmoidCE: {
      const Tensor &z = P(0), &y = P(1);
      const Tensor* w = n.parents.size() > 2 ? &P(2) : nullptr;
      double total = 0, wsum = 0;
      for (int64_t i = 0; i < z.size(); ++i) {
        if (y[i] != 0.0 && y[i] != 1.0)
          fail("sigmoid_ce: label " + std::to_string(y[i]) + " at index " + std::to_string(i) +
               " is not binary");
        double wi = w ? (*w)[i] : 1.0;
        double zi = z[i];
        double ell = std::max(zi, 0.0) - zi * y[i] + std::log1p(std::exp(-std::abs(zi)));
        total += wi * ell;
        wsum += wi;
      }
      v[0] = wsum > 0 ? total / wsum : 0.0;
      n.d0 = wsum;  // stashed for backward
      break;
    }
    case Op::SoftmaxCE: {
      const Tensor &z = P(0), &t = P(1);
      const Tensor* w = n.parents.size() > 2 ? &P(2) : nullptr;
      int batch = z.dim(0), k = z.dim(1);
      double total = 0, wsum = 0;
      for (int i = 0; i < batch; ++i) {
        const double* zi = z.ptr() + static_cast<int64_t>(i) * k;
        const double* ti = t.ptr() + static_cast<int64_t>(i) * k;
        int hot = -1;
        for (int j = 0; j < k; ++j) {
          if (ti[j] == 1.0 && hot < 0)
            hot = j;
          else if (ti[j] != 0.0)
            fail("softmax_ce: row " + std::to_string(i) + " is not one-hot");
        }
        if (hot < 0) fail("softmax_ce: row " + std::to_string(i) + " has no hot entry");
        double m = zi[0];
        for (int j = 1; j < k; ++j) m = std::max(m, zi[j]);
        double se = 0;
        for (int j = 0; j < k; ++j) se += std::exp(zi[j] - m);
        double wi = w ? (*w)[i] : 1.0;
        total += wi * (m + std::log(se) - zi[hot]);
        wsum += wi;
      }
      v[0] = wsum > 0 ? total / wsum : 0.0;
      n.d0 = wsum;
      break;
    }
    case Op::SoftmaxCEUniform: {
      const Tensor& z = P(0);
      const Tensor* w = n.parents.size() > 1 ? &P(1) : nullptr;
      int batch = z.dim(0), k = z.dim(1);
      double total = 0, wsum = 0;
      for (int i = 0; i < batch; ++i) {
        const double* zi = z.ptr() + static_cast<int64_t>(i) * k;
        double m = zi[0], mean = 0;
        for (int j = 0; j < k; ++j) {
          m = std::max(m, zi[j]);
          mean += zi[j];
        }
        mean /= k;
        double se = 0;
        for (int j = 0; j < k; ++j) se += std::exp(zi[j] - m);
        double wi = w ? (*w)[i] : 1.0;
        total += wi * (m + std::log(se) - mean);
        wsum += wi;
      }
      v[0] = wsum > 0 ? total / wsum : 0.0;
      n.d0 = wsum;
      break;
    }
    default:
      fail("eval on non-computable op");
  }
}

// ---------------------------------------------------------------------------
// Backward

const Tensor& Graph::grad(NodeId id) const {
  const Node& n = node(id);
  if (n.grad.shape != n.value.shape || n.grad.data.size() != n.value.data.size())
    fail("gradient of node " + std::to_string(id) + " unavailable; run backward first");
  return n.grad;
}

Tensor& Graph::grad_buf(NodeId id) { return node(id).grad; }

void Graph::backward(NodeId loss) {
  if (!forward_done_) fail("backward called before forward");
  const Node& ln = node(loss);
  if (numel(ln.value.shape) != 1)
    fail("backward: loss node " + std::to_string(loss) + " is not scalar, shape " +
         shape_str(ln.value.shape));

  for (auto& n : nodes_) {
    if (n.grad.shape != n.value.shape || n.grad.data.size() != n.value.data.size())
      n.grad = Tensor(n.value.shape);
    else
      n.grad.fill(0.0);
  }

  // Restrict the sweep to ancestors reachable through differentiable nodes.
  std::vector<char> reach(nodes_.size(), 0);
  std::vector<NodeId> stack = {loss};
  reach[static_cast<size_t>(loss)] = 1;
  while (!stack.empty()) {
    NodeId id = stack.back();
    stack.pop_back();
    const Node& n = node(id);
    if (!n.requires_grad && id != loss) continue;
    for (NodeId p : n.parents) {
      if (!reach[static_cast<size_t>(p)] && node(p).requires_grad) {
        reach[static_cast<size_t>(p)] = 1;
        stack.push_back(p);
      }
    }
  }

  node(loss).grad.fill(1.0);
  for (NodeId id = loss; id >= 0; --id) {
    if (!reach[static_cast<size_t>(id)]) continue;
    if (!node(id).requires_grad) continue;
    backprop(id);
  }
}

void Graph::backprop(NodeId id) {
  Node& n = node(id);
  const Tensor& g = n.grad;
  auto P = [&](int i) -> const Tensor& { return node(n.parents[static_cast<size_t>(i)]).value; };
  auto G = [&](int i) -> Tensor& { return grad_buf(n.parents[static_cast<size_t>(i)]); };
  auto wants = [&](int i) { return node(n.parents[static_cast<size_t>(i)]).requires_grad; };

  switch (n.op) {
    case Op::Placeholder:
    case Op::Constant:
    case Op::Param:
    case Op::StopGradient:
      break;
    case Op::Add: {
      for (int s = 0; s < 2; ++s)
        if (wants(s)) {
          Tensor& d = G(s);
          for (int64_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
      break;
    }
    case Op::AddScaled: {
      if (wants(0)) {
        Tensor& d = G(0);
        for (int64_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      if (wants(1)) {
        Tensor& d = G(1);
        for (int64_t i = 0; i < g.size(); ++i) d[i] += n.d0 * g[i];
      }
      break;
    }
    case Op::Mul: {
      if (wants(0)) {
        Tensor& d = G(0);
        const Tensor& b = P(1);
        for (int64_t i = 0; i < g.size(); ++i) d[i] += g[i] * b[i];
      }
      if (wants(1)) {
        Tensor& d = G(1);
        const Tensor& a = P(0);
        for (int64_t i = 0; i < g.size(); ++i) d[i] += g[i] * a[i];
      }
      break;
    }
    case Op::MatMul: {
      const Tensor &a = P(0), &b = P(1);
      ConstMatMap A(a.ptr(), a.dim(0), a.dim(1)), B(b.ptr(), b.dim(0), b.dim(1));
      ConstMatMap Gm(g.ptr(), n.value.dim(0), n.value.dim(1));
      if (wants(0)) {
        MatMap dA(G(0).ptr(), a.dim(0), a.dim(1));
        dA.noalias() += Gm * B.transpose();
      }
      if (wants(1)) {
        MatMap dB(G(1).ptr(), b.dim(0), b.dim(1));
        dB.noalias() += A.transpose() * Gm;
      }
      break;
    }
    case Op::AddBias: {
      int rows = n.value.dim(0), cols = n.value.dim(1);
      if (wants(0)) {
        Tensor& d = G(0);
        for (int64_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      if (wants(1)) {
        Tensor& d = G(1);
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < cols; ++j) d[j] += g[static_cast<int64_t>(i) * cols + j];
      }
      break;
    }
    case Op::ScaleByScalar: {
      const Tensor& x = P(0);
      double s = P(1)[0];
      if (wants(0)) {
        Tensor& d = G(0);
        for (int64_t i = 0; i < g.size(); ++i) d[i] += g[i] * s;
      }
      if (wants(1)) {
        double acc = 0;
        for (int64_t i = 0; i < g.size(); ++i) acc += g[i] * x[i];
        G(1)[0] += acc;
      }
      break;
    }
    case Op::Conv2d: {
      const Tensor &x = P(0), &k = P(1);
      ConvDims d = conv_dims(x.shape, k.shape, n.i0, n.i1 ? Padding::Same : Padding::Valid);
      const int patch = d.patch(), pos = d.positions();
      const int64_t bp = static_cast<int64_t>(d.batch) * pos;
      // gather output grads into [batch*positions, out_ch]
      RowMat gm(bp, d.out_ch);
      for (int bi = 0; bi < d.batch; ++bi)
        for (int oc = 0; oc < d.out_ch; ++oc) {
          const double* src = g.ptr() + (static_cast<int64_t>(bi) * d.out_ch + oc) * pos;
          for (int p = 0; p < pos; ++p) gm(static_cast<Eigen::Index>(bi) * pos + p, oc) = src[p];
        }
      ConstMatMap cols(n.scratch.ptr(), bp, patch);
      if (wants(1)) {
        MatMap dk(G(1).ptr(), d.out_ch, patch);
        dk.noalias() += gm.transpose() * cols;
      }
      if (wants(2)) {
        Tensor& db = G(2);
        for (int oc = 0; oc < d.out_ch; ++oc) db[oc] += gm.col(oc).sum();
      }
      if (wants(0)) {
        RowMat dcols(bp, patch);
        ConstMatMap km(k.ptr(), d.out_ch, patch);
        dcols.noalias() = gm * km;
        Tensor& dx = G(0);
        for (int bi = 0; bi < d.batch; ++bi) {
          double* dxb = dx.ptr() + static_cast<int64_t>(bi) * d.in_ch * d.in_h * d.in_w;
          for (int oh = 0; oh < d.out_h; ++oh)
            for (int ow = 0; ow < d.out_w; ++ow) {
              const double* row = dcols.data() +
                                  (static_cast<int64_t>(bi) * pos + static_cast<int64_t>(oh) * d.out_w + ow) * patch;
              for (int c = 0; c < d.in_ch; ++c) {
                double* dxc = dxb + static_cast<int64_t>(c) * d.in_h * d.in_w;
                for (int kh = 0; kh < d.kh; ++kh) {
                  int ih = oh * d.stride - d.pad_top + kh;
                  if (ih < 0 || ih >= d.in_h) {
                    row += d.kw;
                    continue;
                  }
                  for (int kw = 0; kw < d.kw; ++kw) {
                    int iw = ow * d.stride - d.pad_left + kw;
                    if (iw >= 0 && iw < d.in_w) dxc[ih * d.in_w + iw] += *row;
                    ++row;
                  }
                }
              }
            }
        }
      }
      break;
    }
    case Op::Relu: {
      if (wants(0)) {
        const Tensor& x = P(0);
        Tensor& d = G(0);
        for (int64_t i = 0; i < g.size(); ++i)
          if (x[i] > 0) d[i] += g[i];
      }
      break;
    }
    case Op::LeakyRelu: {
      if (wants(0)) {
        const Tensor& x = P(0);
        Tensor& d = G(0);
        for (int64_t i = 0; i < g.size(); ++i) d[i] += g[i] * (x[i] > 0 ? 1.0 : n.d0);
      }
      break;
    }
    case Op::Sigmoid: {
      if (wants(0)) {
        Tensor& d = G(0);
        for (int64_t i = 0; i < g.size(); ++i) {
          double s = n.value[i];
          d[i] += g[i] * s * (1.0 - s);
        }
      }
      break;
    }
    case Op::Flatten: {
      if (wants(0)) {
        Tensor& d = G(0);
        for (int64_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      break;
    }
    case Op::ConcatCols: {
      const Tensor &a = P(0), &b = P(1);
      int rows = a.dim(0), ca = a.dim(1), cb = b.dim(1);
      if (wants(0)) {
        Tensor& d = G(0);
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < ca; ++j)
            d[static_cast<int64_t>(i) * ca + j] += g[static_cast<int64_t>(i) * (ca + cb) + j];
      }
      if (wants(1)) {
        Tensor& d = G(1);
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < cb; ++j)
            d[static_cast<int64_t>(i) * cb + j] += g[static_cast<int64_t>(i) * (ca + cb) + ca + j];
      }
      break;
    }
    case Op::SparseAffine: {
      const Tensor &x = P(0), &w = P(1);
      int batch = x.dim(0), in = x.dim(1), out = n.value.dim(1);
      if (wants(1)) {
        Tensor& dw = G(1);
        for (size_t e = 0; e < n.pattern->size(); ++e) {
          const auto& [row, col] = (*n.pattern)[e];
          double acc = 0;
          for (int i = 0; i < batch; ++i)
            acc += g[static_cast<int64_t>(i) * out + row] * x[static_cast<int64_t>(i) * in + col];
          dw[static_cast<int64_t>(e)] += acc;
        }
      }
      if (wants(2)) {
        Tensor& db = G(2);
        for (int i = 0; i < batch; ++i)
          for (int j = 0; j < out; ++j) db[j] += g[static_cast<int64_t>(i) * out + j];
      }
      if (wants(0)) {
        Tensor& dx = G(0);
        for (size_t e = 0; e < n.pattern->size(); ++e) {
          const auto& [row, col] = (*n.pattern)[e];
          double we = w[static_cast<int64_t>(e)];
          for (int i = 0; i < batch; ++i)
            dx[static_cast<int64_t>(i) * in + col] += we * g[static_cast<int64_t>(i) * out + row];
        }
      }
      break;
    }
    case Op::SigmoidCE: {
      if (wants(0)) {
        const Tensor &z = P(0), &y = P(1);
        const Tensor* w = n.parents.size() > 2 ? &P(2) : nullptr;
        double wsum = n.d0;
        if (wsum > 0) {
          Tensor& d = G(0);
          double go = g[0];
          for (int64_t i = 0; i < z.size(); ++i) {
            double wi = w ? (*w)[i] : 1.0;
            d[i] += go * wi * (stable_sigmoid(z[i]) - y[i]) / wsum;
          }
        }
      }
      break;
    }
    case Op::SoftmaxCE: {
      if (wants(0)) {
        const Tensor &z = P(0), &t = P(1);
        const Tensor* w = n.parents.size() > 2 ? &P(2) : nullptr;
        double wsum = n.d0;
        if (wsum > 0) {
          int batch = z.dim(0), k = z.dim(1);
          Tensor& d = G(0);
          double go = g[0];
          for (int i = 0; i < batch; ++i) {
            const double* zi = z.ptr() + static_cast<int64_t>(i) * k;
            double m = zi[0];
            for (int j = 1; j < k; ++j) m = std::max(m, zi[j]);
            double se = 0;
            for (int j = 0; j < k; ++j) se += std::exp(zi[j] - m);
            double wi = w ? (*w)[i] : 1.0;
            for (int j = 0; j < k; ++j) {
              double p = std::exp(zi[j] - m) / se;
              d[static_cast<int64_t>(i) * k + j] +=
                  go * wi * (p - t[static_cast<int64_t>(i) * k + j]) / wsum;
            }
          }
        }
      }
      break;
    }
    case Op::SoftmaxCEUniform: {
      if (wants(0)) {
        const Tensor& z = P(0);
        const Tensor* w = n.parents.size() > 1 ? &P(1) : nullptr;
        double wsum = n.d0;
        if (wsum > 0) {
          int batch = z.dim(0), k = z.dim(1);
          Tensor& d = G(0);
          double go = g[0];
          for (int i = 0; i < batch; ++i) {
            const double* zi = z.ptr() + static_cast<int64_t>(i) * k;
            double m = zi[0];
            for (int j = 1; j < k; ++j) m = std::max(m, zi[j]);
            double se = 0;
            for (int j = 0; j < k; ++j) se += std::exp(zi[j] - m);
            double wi = w ? (*w)[i] : 1.0;
            for (int j = 0; j < k; ++j) {
              double p = std::exp(zi[j] - m) / se;
              d[static_cast<int64_t>(i) * k + j] += go * wi * (p - 1.0 / k) / wsum;
            }
          }
        }
      }
      break;
    }
    default:
      break;
  }
}

std::map<std::string, Tensor> Graph::param_grads(const ParameterSet& params, Partition p) const {
  std::map<std::string, Tensor> out;
  for (const auto& name : params.names()) {
    if (params.at(name).partition != p) continue;
    auto it = param_nodes_.find(name);
    if (it == param_nodes_.end()) {
      out.emplace(name, Tensor(params.at(name).value.shape));
    } else {
      out.emplace(name, grad(it->second));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

double finite_diff_check(const std::function<LossAndGrads(ParameterSet&)>& fn,
                         ParameterSet& params, double step) {
  if (step <= 0) throw std::invalid_argument("finite_diff_check: step must be positive");
  LossAndGrads base = fn(params);
  double worst = 0;
  for (const auto& name : params.names()) {
    Tensor& value = params.at(name).value;
    const Tensor* analytic = nullptr;
    auto it = base.grads.find(name);
    if (it != base.grads.end()) analytic = &it->second;
    for (int64_t i = 0; i < value.size(); ++i) {
      double keep = value[i];
      value[i] = keep + step;
      double up = fn(params).loss;
      value[i] = keep - step;
      double down = fn(params).loss;
      value[i] = keep;
      double numeric = (up - down) / (2 * step);
      double a = analytic ? (*analytic)[i] : 0.0;
      double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace stetho::ad
