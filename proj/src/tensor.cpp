#include "s2rm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

namespace s2rm {

using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

struct OpAccess {
  static const ImplPtr& impl(const Tensor& t) { return t.impl_; }
  static Tensor wrap(ImplPtr p) { return Tensor(std::move(p)); }
};

namespace {

using A = OpAccess;

std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

void check_shape(const Shape& s) {
  for (int e : s)
    if (e <= 0) throw DimensionError("non-positive extent in shape " + shape_str(s));
}

ImplPtr make_impl(Shape shape, std::vector<double> data) {
  auto p = std::make_shared<TensorImpl>();
  p->shape = std::move(shape);
  p->data = std::move(data);
  return p;
}

std::vector<std::int64_t> row_major_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 0);
  std::int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

bool tracked(const ImplPtr& p, const Tape* tp) {
  return p->requires_grad || (tp != nullptr && p->tape == tp);
}

std::vector<double>& sink_buf(GradMap& g, const TensorImpl* p) {
  auto it = g.find(p);
  if (it == g.end())
    it = g.emplace(p, std::vector<double>(p->data.size(), 0.0)).first;
  return it->second;
}

const std::vector<double>* out_grad(GradMap& g, const TensorImpl* p) {
  auto it = g.find(p);
  return it == g.end() ? nullptr : &it->second;
}

// Plan for trailing-axis broadcasting of two shapes. Strides are per output
// axis and zero where the operand is broadcast.
struct BcPlan {
  Shape out;
  std::vector<std::int64_t> sa, sb;
};

BcPlan broadcast_plan(const Shape& a, const Shape& b) {
  const int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
  const int r = std::max(ra, rb);
  BcPlan plan;
  plan.out.assign(r, 1);
  plan.sa.assign(r, 0);
  plan.sb.assign(r, 0);
  auto stra = row_major_strides(a), strb = row_major_strides(b);
  for (int i = 0; i < r; ++i) {
    const int ia = ra - r + i, ib = rb - r + i;
    const int ea = ia >= 0 ? a[ia] : 1;
    const int eb = ib >= 0 ? b[ib] : 1;
    if (ea != eb && ea != 1 && eb != 1)
      throw DimensionError("shapes " + shape_str(a) + " and " + shape_str(b) +
                           " are not broadcast-compatible");
    plan.out[i] = std::max(ea, eb);
    if (ia >= 0 && ea != 1) plan.sa[i] = stra[ia];
    if (ib >= 0 && eb != 1) plan.sb[i] = strb[ib];
  }
  return plan;
}

// Row-major odometer over `out`, calling f(linear, offset_a, offset_b).
template <class F>
void walk(const Shape& out, const std::vector<std::int64_t>& sa,
          const std::vector<std::int64_t>& sb, F&& f) {
  const std::int64_t n = numel(out);
  const int r = static_cast<int>(out.size());
  std::vector<int> idx(r, 0);
  std::int64_t oa = 0, ob = 0;
  for (std::int64_t o = 0; o < n; ++o) {
    f(o, oa, ob);
    for (int ax = r - 1; ax >= 0; --ax) {
      ++idx[ax];
      oa += sa[ax];
      ob += sb[ax];
      if (idx[ax] < out[ax]) break;
      oa -= static_cast<std::int64_t>(out[ax]) * sa[ax];
      ob -= static_cast<std::int64_t>(out[ax]) * sb[ax];
      idx[ax] = 0;
    }
  }
}

Tensor finish(ImplPtr out, Tape* tp, bool track,
              std::function<void(GradMap&)> node) {
  if (tp != nullptr && track) {
    out->tape = tp;
    tp->record(std::move(node));
  }
  return A::wrap(std::move(out));
}

enum class BinKind { kAdd, kSub, kMul };

Tensor binary_ew(BinKind kind, const Tensor& a, const Tensor& b) {
  const ImplPtr& ai = A::impl(a);
  const ImplPtr& bi = A::impl(b);
  BcPlan plan = broadcast_plan(ai->shape, bi->shape);
  auto out = make_impl(plan.out, std::vector<double>(numel(plan.out)));
  const double* pa = ai->data.data();
  const double* pb = bi->data.data();
  double* po = out->data.data();
  switch (kind) {
    case BinKind::kAdd:
      walk(plan.out, plan.sa, plan.sb,
           [&](std::int64_t o, std::int64_t x, std::int64_t y) { po[o] = pa[x] + pb[y]; });
      break;
    case BinKind::kSub:
      walk(plan.out, plan.sa, plan.sb,
           [&](std::int64_t o, std::int64_t x, std::int64_t y) { po[o] = pa[x] - pb[y]; });
      break;
    case BinKind::kMul:
      walk(plan.out, plan.sa, plan.sb,
           [&](std::int64_t o, std::int64_t x, std::int64_t y) { po[o] = pa[x] * pb[y]; });
      break;
  }
  Tape* tp = Tape::current();
  const bool ta = tp && tracked(ai, tp), tb = tp && tracked(bi, tp);
  if (!(ta || tb)) return A::wrap(std::move(out));
  if (ta && ai->requires_grad) tp->note_leaf(ai);
  if (tb && bi->requires_grad) tp->note_leaf(bi);
  TensorImpl* oraw = out.get();
  return finish(out, tp, true, [=](GradMap& g) {
    const auto* go = out_grad(g, oraw);
    if (go == nullptr) return;
    const double* pg = go->data();
    if (ta) {
      double* ga = sink_buf(g, ai.get()).data();
      const double* pbv = bi->data.data();
      walk(plan.out, plan.sa, plan.sb, [&](std::int64_t o, std::int64_t x, std::int64_t y) {
        switch (kind) {
          case BinKind::kAdd:
          case BinKind::kSub: ga[x] += pg[o]; break;
          case BinKind::kMul: ga[x] += pg[o] * pbv[y]; break;
        }
      });
    }
    if (tb) {
      double* gb = sink_buf(g, bi.get()).data();
      const double* pav = ai->data.data();
      walk(plan.out, plan.sa, plan.sb, [&](std::int64_t o, std::int64_t x, std::int64_t y) {
        switch (kind) {
          case BinKind::kAdd: gb[y] += pg[o]; break;
          case BinKind::kSub: gb[y] -= pg[o]; break;
          case BinKind::kMul: gb[y] += pg[o] * pav[x]; break;
        }
      });
    }
  });
}

enum class UnKind { kExp, kTanh, kSigmoid };

Tensor unary_ew(UnKind kind, const Tensor& x) {
  const ImplPtr& xi = A::impl(x);
  auto out = make_impl(xi->shape, std::vector<double>(xi->data.size()));
  const double* px = xi->data.data();
  double* po = out->data.data();
  const std::int64_t n = static_cast<std::int64_t>(xi->data.size());
  for (std::int64_t i = 0; i < n; ++i) {
    switch (kind) {
      case UnKind::kExp: po[i] = std::exp(px[i]); break;
      case UnKind::kTanh: po[i] = std::tanh(px[i]); break;
      case UnKind::kSigmoid: {
        const double v = px[i];
        if (v >= 0.0) {
          po[i] = 1.0 / (1.0 + std::exp(-v));
        } else {
          const double e = std::exp(v);
          po[i] = e / (1.0 + e);
        }
        break;
      }
    }
  }
  Tape* tp = Tape::current();
  if (!(tp && tracked(xi, tp))) return A::wrap(std::move(out));
  if (xi->requires_grad) tp->note_leaf(xi);
  TensorImpl* oraw = out.get();
  ImplPtr oshared = out;
  return finish(out, tp, true, [=](GradMap& g) {
    const auto* go = out_grad(g, oraw);
    if (go == nullptr) return;
    double* gx = sink_buf(g, xi.get()).data();
    const double* py = oshared->data.data();
    const double* pg = go->data();
    const std::int64_t m = static_cast<std::int64_t>(xi->data.size());
    for (std::int64_t i = 0; i < m; ++i) {
      switch (kind) {
        case UnKind::kExp: gx[i] += pg[i] * py[i]; break;
        case UnKind::kTanh: gx[i] += pg[i] * (1.0 - py[i] * py[i]); break;
        case UnKind::kSigmoid: gx[i] += pg[i] * py[i] * (1.0 - py[i]); break;
      }
    }
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape) {
  check_shape(shape);
  auto n = numel(shape);
  return A::wrap(make_impl(std::move(shape), std::vector<double>(n, 0.0)));
}

Tensor Tensor::constant(Shape shape, double value) {
  check_shape(shape);
  auto n = numel(shape);
  return A::wrap(make_impl(std::move(shape), std::vector<double>(n, value)));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  check_shape(shape);
  if (numel(shape) != static_cast<std::int64_t>(values.size()))
    throw DimensionError("value count " + std::to_string(values.size()) +
                         " does not fill shape " + shape_str(shape));
  return A::wrap(make_impl(std::move(shape), std::move(values)));
}

Tensor Tensor::scalar(double value) {
  return A::wrap(make_impl(Shape{}, std::vector<double>{value}));
}

Tensor Tensor::param(Shape shape, std::vector<double> values) {
  for (double& v : values) v = static_cast<double>(static_cast<float>(v));
  Tensor t = from(std::move(shape), std::move(values));
  auto& impl = A::impl(t);
  impl->requires_grad = true;
  impl->grad.assign(impl->data.size(), 0.0);
  return t;
}

void quantize_f32(Tensor& t) {
  for (double& v : A::impl(t)->data) v = static_cast<double>(static_cast<float>(v));
}

std::int64_t Tensor::size() const { return static_cast<std::int64_t>(impl_->data.size()); }

std::span<const double> Tensor::grad() const {
  if (!impl_->requires_grad) throw Error("grad() on a tensor without requires_grad");
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (!impl_->requires_grad) throw Error("grad() on a tensor without requires_grad");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_->requires_grad) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (impl_->data.size() != 1) throw DimensionError("item() on a non-scalar tensor");
  return impl_->data[0];
}

// ---------------------------------------------------------------------------
// Tape

namespace {
thread_local Tape* g_current_tape = nullptr;
}

Tape::Tape() {
  previous_ = g_current_tape;
  g_current_tape = this;
}

Tape::~Tape() { g_current_tape = previous_; }

Tape* Tape::current() { return g_current_tape; }

void Tape::record(std::function<void(GradMap&)> node) { nodes_.push_back(std::move(node)); }

void Tape::note_leaf(const std::shared_ptr<detail::TensorImpl>& leaf) {
  if (seen_leaves_.insert(leaf.get()).second) leaves_.push_back(leaf);
}

void Tape::sweep(const Tensor& loss, GradMap& grads) {
  if (loss.size() != 1) throw Error("backward requires a scalar loss");
  const ImplPtr& li = A::impl(loss);
  if (!(li->tape == this || li->requires_grad))
    throw Error("backward on a tensor not recorded on this tape");
  grads[li.get()] = {1.0};
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)(grads);
}

void Tape::backward(const Tensor& loss) {
  GradMap grads;
  sweep(loss, grads);
  const ImplPtr& li = A::impl(loss);
  if (li->requires_grad && seen_leaves_.find(li.get()) == seen_leaves_.end())
    note_leaf(li);
  for (const auto& leaf : leaves_) {
    auto it = grads.find(leaf.get());
    if (it == grads.end()) continue;
    double* dst = leaf->grad.data();
    const auto& src = it->second;
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
  }
}

void Tape::backward(const Tensor& loss, GradMap& sink) {
  GradMap grads;
  sweep(loss, grads);
  const ImplPtr& li = A::impl(loss);
  if (li->requires_grad && seen_leaves_.find(li.get()) == seen_leaves_.end())
    note_leaf(li);
  for (const auto& leaf : leaves_) {
    auto it = grads.find(leaf.get());
    if (it == grads.end()) continue;
    auto& dst = sink_buf(sink, leaf.get());
    const auto& src = it->second;
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
  }
}

// ---------------------------------------------------------------------------
// contract

namespace {

struct EinsumPlan {
  std::vector<int> extents;                      // per label slot
  std::vector<std::int64_t> sa, sb, so;          // strides per label slot
  Shape out_shape;
};

EinsumPlan parse_einsum(const std::string& spec, const Shape& a, const Shape& b) {
  const auto comma = spec.find(',');
  const auto arrow = spec.find("->");
  if (comma == std::string::npos || arrow == std::string::npos || comma > arrow)
    throw Error("contract spec must look like \"ij,jk->ik\", got \"" + spec + "\"");
  const std::string la = spec.substr(0, comma);
  const std::string lb = spec.substr(comma + 1, arrow - comma - 1);
  const std::string lo = spec.substr(arrow + 2);
  if (la.size() != a.size() || lb.size() != b.size())
    throw DimensionError("contract labels \"" + spec + "\" do not match operand ranks " +
                         shape_str(a) + ", " + shape_str(b));

  // Slot order: output labels first (in output order), then the summed
  // labels in order of first appearance. The summed slots therefore vary
  // fastest, giving an ascending-index inner accumulation.
  std::vector<char> slots;
  auto slot_of = [&](char c) -> int {
    for (std::size_t i = 0; i < slots.size(); ++i)
      if (slots[i] == c) return static_cast<int>(i);
    return -1;
  };
  std::unordered_map<char, int> extent;
  auto note_extent = [&](char c, int e) {
    auto it = extent.find(c);
    if (it == extent.end()) {
      extent.emplace(c, e);
    } else if (it->second != e) {
      throw DimensionError(std::string("extent mismatch on shared label '") + c +
                           "': " + std::to_string(it->second) + " vs " + std::to_string(e));
    }
  };
  for (std::size_t i = 0; i < la.size(); ++i) note_extent(la[i], a[i]);
  for (std::size_t i = 0; i < lb.size(); ++i) note_extent(lb[i], b[i]);
  for (char c : lo) {
    if (extent.find(c) == extent.end())
      throw Error(std::string("output label '") + c + "' missing from inputs in \"" + spec + "\"");
    if (slot_of(c) >= 0)
      throw Error(std::string("repeated output label '") + c + "' in \"" + spec + "\"");
    slots.push_back(c);
  }
  for (char c : la)
    if (slot_of(c) < 0) slots.push_back(c);
  for (char c : lb)
    if (slot_of(c) < 0) slots.push_back(c);

  EinsumPlan plan;
  plan.extents.resize(slots.size());
  plan.sa.assign(slots.size(), 0);
  plan.sb.assign(slots.size(), 0);
  plan.so.assign(slots.size(), 0);
  for (std::size_t i = 0; i < slots.size(); ++i) plan.extents[i] = extent[slots[i]];
  auto stra = row_major_strides(a), strb = row_major_strides(b);
  for (std::size_t i = 0; i < la.size(); ++i) plan.sa[slot_of(la[i])] += stra[i];
  for (std::size_t i = 0; i < lb.size(); ++i) plan.sb[slot_of(lb[i])] += strb[i];
  plan.out_shape.reserve(lo.size());
  for (char c : lo) plan.out_shape.push_back(extent[c]);
  auto stro = row_major_strides(plan.out_shape);
  for (std::size_t i = 0; i < lo.size(); ++i) plan.so[i] = stro[i];
  return plan;
}

// target[so] += x[sx] * y[sy] over the full slot space.
void einsum_accumulate(const std::vector<int>& ext, const std::vector<std::int64_t>& st,
                       const std::vector<std::int64_t>& sx, const std::vector<std::int64_t>& sy,
                       double* t, const double* x, const double* y) {
  const int r = static_cast<int>(ext.size());
  std::int64_t n = 1;
  for (int e : ext) n *= e;
  std::vector<int> idx(r, 0);
  std::int64_t ot = 0, ox = 0, oy = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    t[ot] += x[ox] * y[oy];
    for (int ax = r - 1; ax >= 0; --ax) {
      ++idx[ax];
      ot += st[ax];
      ox += sx[ax];
      oy += sy[ax];
      if (idx[ax] < ext[ax]) break;
      ot -= static_cast<std::int64_t>(ext[ax]) * st[ax];
      ox -= static_cast<std::int64_t>(ext[ax]) * sx[ax];
      oy -= static_cast<std::int64_t>(ext[ax]) * sy[ax];
      idx[ax] = 0;
    }
  }
}

}  // namespace

Tensor contract(const std::string& spec, const Tensor& a, const Tensor& b) {
  const ImplPtr& ai = A::impl(a);
  const ImplPtr& bi = A::impl(b);
  EinsumPlan plan = parse_einsum(spec, ai->shape, bi->shape);
  auto out = make_impl(plan.out_shape, std::vector<double>(numel(plan.out_shape), 0.0));
  einsum_accumulate(plan.extents, plan.so, plan.sa, plan.sb, out->data.data(),
                    ai->data.data(), bi->data.data());
  Tape* tp = Tape::current();
  const bool ta = tp && tracked(ai, tp), tb = tp && tracked(bi, tp);
  if (!(ta || tb)) return A::wrap(std::move(out));
  if (ta && ai->requires_grad) tp->note_leaf(ai);
  if (tb && bi->requires_grad) tp->note_leaf(bi);
  TensorImpl* oraw = out.get();
  return finish(out, tp, true, [=](GradMap& g) {
    const auto* go = out_grad(g, oraw);
    if (go == nullptr) return;
    if (ta)
      einsum_accumulate(plan.extents, plan.sa, plan.so, plan.sb,
                        sink_buf(g, ai.get()).data(), go->data(), bi->data.data());
    if (tb)
      einsum_accumulate(plan.extents, plan.sb, plan.so, plan.sa,
                        sink_buf(g, bi.get()).data(), go->data(), ai->data.data());
  });
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) { return binary_ew(BinKind::kAdd, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_ew(BinKind::kSub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_ew(BinKind::kMul, a, b); }
Tensor exp(const Tensor& x) { return unary_ew(UnKind::kExp, x); }
Tensor tanh(const Tensor& x) { return unary_ew(UnKind::kTanh, x); }
Tensor sigmoid(const Tensor& x) { return unary_ew(UnKind::kSigmoid, x); }

Tensor scale_shift(const Tensor& x, double scale, double shift) {
  const ImplPtr& xi = A::impl(x);
  auto out = make_impl(xi->shape, std::vector<double>(xi->data.size()));
  const double* px = xi->data.data();
  double* po = out->data.data();
  const std::int64_t n = static_cast<std::int64_t>(xi->data.size());
  for (std::int64_t i = 0; i < n; ++i) po[i] = scale * px[i] + shift;
  Tape* tp = Tape::current();
  if (!(tp && tracked(xi, tp))) return A::wrap(std::move(out));
  if (xi->requires_grad) tp->note_leaf(xi);
  TensorImpl* oraw = out.get();
  return finish(out, tp, true, [=](GradMap& g) {
    const auto* go = out_grad(g, oraw);
    if (go == nullptr) return;
    double* gx = sink_buf(g, xi.get()).data();
    const double* pg = go->data();
    for (std::int64_t i = 0; i < n; ++i) gx[i] += scale * pg[i];
  });
}

Tensor elementwise(ElementwiseKind kind, const Tensor& a, const Tensor* b, double extra) {
  switch (kind) {
    case ElementwiseKind::kExp: return exp(a);
    case ElementwiseKind::kTanh: return tanh(a);
    case ElementwiseKind::kSigmoid: return sigmoid(a);
    case ElementwiseKind::kScale: return scale_shift(a, extra, 0.0);
    case ElementwiseKind::kAdd:
    case ElementwiseKind::kMul:
    case ElementwiseKind::kSub:
      if (b == nullptr) throw Error("elementwise binary kind requires two operands");
      if (kind == ElementwiseKind::kAdd) return add(a, *b);
      if (kind == ElementwiseKind::kSub) return sub(a, *b);
      return mul(a, *b);
  }
  throw Error("unknown elementwise kind");
}

// ---------------------------------------------------------------------------
// Axis decompositions

namespace {

struct AxisSplit {
  std::int64_t outer, mid, inner;
};

AxisSplit split_at(const Shape& s, int axis) {
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  AxisSplit sp{1, s[axis], 1};
  for (int i = 0; i < axis; ++i) sp.outer *= s[i];
  for (int i = axis + 1; i < static_cast<int>(s.size()); ++i) sp.inner *= s[i];
  return sp;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  const ImplPtr& xi = A::impl(x);
  const AxisSplit sp = split_at(xi->shape, axis);
  auto out = make_impl(xi->shape, std::vector<double>(xi->data.size()));
  const double* px = xi->data.data();
  double* po = out->data.data();
  for (std::int64_t o = 0; o < sp.outer; ++o)
    for (std::int64_t in = 0; in < sp.inner; ++in) {
      const std::int64_t base = o * sp.mid * sp.inner + in;
      double mx = px[base];
      for (std::int64_t m = 1; m < sp.mid; ++m)
        mx = std::max(mx, px[base + m * sp.inner]);
      double sum = 0.0;
      for (std::int64_t m = 0; m < sp.mid; ++m) {
        const double e = std::exp(px[base + m * sp.inner] - mx);
        po[base + m * sp.inner] = e;
        sum += e;
      }
      for (std::int64_t m = 0; m < sp.mid; ++m) po[base + m * sp.inner] /= sum;
    }
  Tape* tp = Tape::current();
  if (!(tp && tracked(xi, tp))) return A::wrap(std::move(out));
  if (xi->requires_grad) tp->note_leaf(xi);
  TensorImpl* oraw = out.get();
  ImplPtr oshared = out;
  return finish(out, tp, true, [=](GradMap& g) {
    const auto* go = out_grad(g, oraw);
    if (go == nullptr) return;
    double* gx = sink_buf(g, xi.get()).data();
    const double* py = oshared->data.data();
    const double* pg = go->data();
    for (std::int64_t o = 0; o < sp.outer; ++o)
      for (std::int64_t in = 0; in < sp.inner; ++in) {
        const std::int64_t base = o * sp.mid * sp.inner + in;
        double dot = 0.0;
        for (std::int64_t m = 0; m < sp.mid; ++m) {
          const std::int64_t k = base + m * sp.inner;
          dot += pg[k] * py[k];
        }
        for (std::int64_t m = 0; m < sp.mid; ++m) {
          const std::int64_t k = base + m * sp.inner;
          gx[k] += py[k] * (pg[k] - dot);
        }
      }
  });
}

Tensor reduce_sum(const Tensor& x, int axis) {
  const ImplPtr& xi = A::impl(x);
  const AxisSplit sp = split_at(xi->shape, axis);
  Shape oshape;
  for (int i = 0; i < static_cast<int>(xi->shape.size()); ++i)
    if (i != axis) oshape.push_back(xi->shape[i]);
  auto out = make_impl(oshape, std::vector<double>(sp.outer * sp.inner, 0.0));
  const double* px = xi->data.data();
  double* po = out->data.data();
  for (std::int64_t o = 0; o < sp.outer; ++o)
    for (std::int64_t m = 0; m < sp.mid; ++m)
      for (std::int64_t in = 0; in < sp.inner; ++in)
        po[o * sp.inner + in] += px[(o * sp.mid + m) * sp.inner + in];
  Tape* tp = Tape::current();
  if (!(tp && tracked(xi, tp))) return A::wrap(std::move(out));
  if (xi->requires_grad) tp->note_leaf(xi);
  TensorImpl* oraw = out.get();
  return finish(out, tp, true, [=](GradMap& g) {
    const auto* go = out_grad(g, oraw);
    if (go == nullptr) return;
    double* gx = sink_buf(g, xi.get()).data();
    const double* pg = go->data();
    for (std::int64_t o = 0; o < sp.outer; ++o)
      for (std::int64_t m = 0; m < sp.mid; ++m)
        for (std::int64_t in = 0; in < sp.inner; ++in)
          gx[(o * sp.mid + m) * sp.inner + in] += pg[o * sp.inner + in];
  });
}

Tensor reduce_sum_all(const Tensor& x) {
  const ImplPtr& xi = A::impl(x);
  double sum = 0.0;
  for (double v : xi->data) sum += v;
  auto out = make_impl(Shape{}, std::vector<double>{sum});
  Tape* tp = Tape::current();
  if (!(tp && tracked(xi, tp))) return A::wrap(std::move(out));
  if (xi->requires_grad) tp->note_leaf(xi);
  TensorImpl* oraw = out.get();
  return finish(out, tp, true, [=](GradMap& g) {
    const auto* go = out_grad(g, oraw);
    if (go == nullptr) return;
    double* gx = sink_buf(g, xi.get()).data();
    const double gv = (*go)[0];
    for (std::size_t i = 0; i < xi->data.size(); ++i) gx[i] += gv;
  });
}

Tensor reduce_sum_rows_ordered(const Tensor& x) {
  const ImplPtr& xi = A::impl(x);
  if (xi->shape.size() != 2)
    throw DimensionError("reduce_sum_rows_ordered expects a rank-2 tensor");
  const int rows = xi->shape[0], cols = xi->shape[1];
  auto out = make_impl(Shape{cols}, std::vector<double>(cols));
  std::vector<double> column(rows);
  for (int c = 0; c < cols; ++c) {
    for (int r = 0; r < rows; ++r) column[r] = xi->data[static_cast<std::size_t>(r) * cols + c];
    std::sort(column.begin(), column.end());
    double acc = 0.0;
    for (double v : column) acc += v;
    out->data[c] = acc;
  }
  Tape* tp = Tape::current();
  if (!(tp && tracked(xi, tp))) return A::wrap(std::move(out));
  if (xi->requires_grad) tp->note_leaf(xi);
  TensorImpl* oraw = out.get();
  return finish(out, tp, true, [=](GradMap& g) {
    const auto* go = out_grad(g, oraw);
    if (go == nullptr) return;
    double* gx = sink_buf(g, xi.get()).data();
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) gx[static_cast<std::size_t>(r) * cols + c] += (*go)[c];
  });
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw DimensionError("concat of zero tensors");
  const int r = xs[0].rank();
  if (axis < 0 || axis >= r)
    throw DimensionError("concat axis " + std::to_string(axis) + " out of range");
  Shape oshape = xs[0].shape();
  std::int64_t total_mid = 0;
  for (const Tensor& t : xs) {
    if (t.rank() != r) throw DimensionError("concat rank mismatch");
    for (int i = 0; i < r; ++i)
      if (i != axis && t.shape()[i] != oshape[i])
        throw DimensionError("concat extent mismatch off the concat axis");
    total_mid += t.shape()[axis];
  }
  oshape[axis] = static_cast<int>(total_mid);
  const AxisSplit osp = split_at(oshape, axis);
  auto out = make_impl(oshape, std::vector<double>(numel(oshape)));
  double* po = out->data.data();
  std::int64_t mid_off = 0;
  for (const Tensor& t : xs) {
    const ImplPtr& ti = A::impl(t);
    const AxisSplit tsp = split_at(ti->shape, axis);
    const double* pt = ti->data.data();
    for (std::int64_t o = 0; o < tsp.outer; ++o)
      for (std::int64_t m = 0; m < tsp.mid; ++m)
        std::memcpy(po + ((o * osp.mid + mid_off + m) * osp.inner),
                    pt + ((o * tsp.mid + m) * tsp.inner),
                    sizeof(double) * tsp.inner);
    mid_off += tsp.mid;
  }
  Tape* tp = Tape::current();
  bool any = false;
  std::vector<bool> tr(xs.size());
  std::vector<ImplPtr> impls(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    impls[i] = A::impl(xs[i]);
    tr[i] = tp && tracked(impls[i], tp);
    any = any || tr[i];
    if (tr[i] && impls[i]->requires_grad) tp->note_leaf(impls[i]);
  }
  if (!(tp && any)) return A::wrap(std::move(out));
  TensorImpl* oraw = out.get();
  return finish(out, tp, true, [=](GradMap& g) {
    const auto* go = out_grad(g, oraw);
    if (go == nullptr) return;
    const double* pg = go->data();
    std::int64_t moff = 0;
    for (std::size_t i = 0; i < impls.size(); ++i) {
      const AxisSplit tsp = split_at(impls[i]->shape, axis);
      if (tr[i]) {
        double* gx = sink_buf(g, impls[i].get()).data();
        for (std::int64_t o = 0; o < tsp.outer; ++o)
          for (std::int64_t m = 0; m < tsp.mid; ++m)
            for (std::int64_t in = 0; in < tsp.inner; ++in)
              gx[(o * tsp.mid + m) * tsp.inner + in] +=
                  pg[(o * osp.mid + moff + m) * osp.inner + in];
      }
      moff += tsp.mid;
    }
  });
}

Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const ImplPtr& xi = A::impl(x);
  const ImplPtr& wi = A::impl(weight);
  const ImplPtr& bi = A::impl(bias);
  if (wi->shape.size() != 2) throw DimensionError("affine weight must be rank 2");
  const int in = wi->shape[0], outw = wi->shape[1];
  if (bi->shape.size() != 1 || bi->shape[0] != outw)
    throw DimensionError("affine bias must have shape (" + std::to_string(outw) + ")");
  const bool batched = xi->shape.size() == 2;
  if (!batched && xi->shape.size() != 1)
    throw DimensionError("affine input must be rank 1 or 2");
  const int rows = batched ? xi->shape[0] : 1;
  if ((batched ? xi->shape[1] : xi->shape[0]) != in)
    throw DimensionError("affine input width " + shape_str(xi->shape) +
                         " does not match weight " + shape_str(wi->shape));
  Shape oshape = batched ? Shape{rows, outw} : Shape{outw};
  auto out = make_impl(oshape, std::vector<double>(static_cast<std::size_t>(rows) * outw));
  const double* px = xi->data.data();
  const double* pw = wi->data.data();
  const double* pb = bi->data.data();
  double* po = out->data.data();
  for (int n = 0; n < rows; ++n) {
    double* orow = po + static_cast<std::int64_t>(n) * outw;
    std::memcpy(orow, pb, sizeof(double) * outw);
    const double* xrow = px + static_cast<std::int64_t>(n) * in;
    for (int i = 0; i < in; ++i) {
      const double xv = xrow[i];
      if (xv == 0.0) continue;  // exact no-op terms; common for binary crops
      const double* wrow = pw + static_cast<std::int64_t>(i) * outw;
      for (int o = 0; o < outw; ++o) orow[o] += xv * wrow[o];
    }
  }
  Tape* tp = Tape::current();
  const bool tx = tp && tracked(xi, tp);
  const bool tw = tp && tracked(wi, tp);
  const bool tb = tp && tracked(bi, tp);
  if (!(tx || tw || tb)) return A::wrap(std::move(out));
  if (tx && xi->requires_grad) tp->note_leaf(xi);
  if (tw && wi->requires_grad) tp->note_leaf(wi);
  if (tb && bi->requires_grad) tp->note_leaf(bi);
  TensorImpl* oraw = out.get();
  return finish(out, tp, true, [=](GradMap& g) {
    const auto* go = out_grad(g, oraw);
    if (go == nullptr) return;
    const double* pg = go->data();
    if (tx) {
      double* gx = sink_buf(g, xi.get()).data();
      for (int n = 0; n < rows; ++n) {
        const double* grow = pg + static_cast<std::int64_t>(n) * outw;
        double* gxrow = gx + static_cast<std::int64_t>(n) * in;
        for (int i = 0; i < in; ++i) {
          const double* wrow = wi->data.data() + static_cast<std::int64_t>(i) * outw;
          double acc = 0.0;
          for (int o = 0; o < outw; ++o) acc += grow[o] * wrow[o];
          gxrow[i] += acc;
        }
      }
    }
    if (tw) {
      double* gw = sink_buf(g, wi.get()).data();
      for (int n = 0; n < rows; ++n) {
        const double* grow = pg + static_cast<std::int64_t>(n) * outw;
        const double* xrow = xi->data.data() + static_cast<std::int64_t>(n) * in;
        for (int i = 0; i < in; ++i) {
          const double xv = xrow[i];
          if (xv == 0.0) continue;
          double* gwrow = gw + static_cast<std::int64_t>(i) * outw;
          for (int o = 0; o < outw; ++o) gwrow[o] += xv * grow[o];
        }
      }
    }
    if (tb) {
      double* gb = sink_buf(g, bi.get()).data();
      for (int n = 0; n < rows; ++n) {
        const double* grow = pg + static_cast<std::int64_t>(n) * outw;
        for (int o = 0; o < outw; ++o) gb[o] += grow[o];
      }
    }
  });
}

Tensor l2_normalize(const Tensor& x, int axis) {
  const ImplPtr& xi = A::impl(x);
  const AxisSplit sp = split_at(xi->shape, axis);
  auto out = make_impl(xi->shape, std::vector<double>(xi->data.size()));
  std::vector<double> norms(static_cast<std::size_t>(sp.outer * sp.inner));
  const double* px = xi->data.data();
  double* po = out->data.data();
  for (std::int64_t o = 0; o < sp.outer; ++o)
    for (std::int64_t in = 0; in < sp.inner; ++in) {
      const std::int64_t base = o * sp.mid * sp.inner + in;
      double ss = 0.0;
      for (std::int64_t m = 0; m < sp.mid; ++m) {
        const double v = px[base + m * sp.inner];
        ss += v * v;
      }
      const double norm = std::sqrt(ss);
      if (!(norm > 1e-150))
        throw DegenerateInputError("l2_normalize on a (near-)zero fiber");
      norms[o * sp.inner + in] = norm;
      for (std::int64_t m = 0; m < sp.mid; ++m)
        po[base + m * sp.inner] = px[base + m * sp.inner] / norm;
    }
  Tape* tp = Tape::current();
  if (!(tp && tracked(xi, tp))) return A::wrap(std::move(out));
  if (xi->requires_grad) tp->note_leaf(xi);
  TensorImpl* oraw = out.get();
  ImplPtr oshared = out;
  return finish(out, tp, true, [=, norms = std::move(norms)](GradMap& g) {
    const auto* go = out_grad(g, oraw);
    if (go == nullptr) return;
    double* gx = sink_buf(g, xi.get()).data();
    const double* py = oshared->data.data();
    const double* pg = go->data();
    for (std::int64_t o = 0; o < sp.outer; ++o)
      for (std::int64_t in = 0; in < sp.inner; ++in) {
        const std::int64_t base = o * sp.mid * sp.inner + in;
        const double norm = norms[o * sp.inner + in];
        double dot = 0.0;
        for (std::int64_t m = 0; m < sp.mid; ++m) {
          const std::int64_t k = base + m * sp.inner;
          dot += pg[k] * py[k];
        }
        for (std::int64_t m = 0; m < sp.mid; ++m) {
          const std::int64_t k = base + m * sp.inner;
          gx[k] += (pg[k] - py[k] * dot) / norm;
        }
      }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  check_shape(shape);
  const ImplPtr& xi = A::impl(x);
  if (numel(shape) != static_cast<std::int64_t>(xi->data.size()))
    throw DimensionError("reshape from " + shape_str(xi->shape) + " to " + shape_str(shape) +
                         " changes element count");
  auto out = make_impl(std::move(shape), xi->data);
  Tape* tp = Tape::current();
  if (!(tp && tracked(xi, tp))) return A::wrap(std::move(out));
  if (xi->requires_grad) tp->note_leaf(xi);
  TensorImpl* oraw = out.get();
  return finish(out, tp, true, [=](GradMap& g) {
    const auto* go = out_grad(g, oraw);
    if (go == nullptr) return;
    double* gx = sink_buf(g, xi.get()).data();
    for (std::size_t i = 0; i < go->size(); ++i) gx[i] += (*go)[i];
  });
}

Tensor row(const Tensor& x, int index) {
  const ImplPtr& xi = A::impl(x);
  if (xi->shape.size() < 1) throw DimensionError("row() on a rank-0 tensor");
  if (index < 0 || index >= xi->shape[0])
    throw DimensionError("row index " + std::to_string(index) + " out of range for " +
                         shape_str(xi->shape));
  Shape oshape(xi->shape.begin() + 1, xi->shape.end());
  const std::int64_t width = numel(oshape);
  auto out = make_impl(oshape, std::vector<double>(
                                   xi->data.begin() + index * width,
                                   xi->data.begin() + (index + 1) * width));
  Tape* tp = Tape::current();
  if (!(tp && tracked(xi, tp))) return A::wrap(std::move(out));
  if (xi->requires_grad) tp->note_leaf(xi);
  TensorImpl* oraw = out.get();
  return finish(out, tp, true, [=](GradMap& g) {
    const auto* go = out_grad(g, oraw);
    if (go == nullptr) return;
    double* gx = sink_buf(g, xi.get()).data();
    for (std::int64_t i = 0; i < width; ++i) gx[index * width + i] += (*go)[i];
  });
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw DimensionError("stack_rows of zero tensors");
  const int width = rows[0].rank() == 1 ? rows[0].shape()[0] : -1;
  if (width < 0) throw DimensionError("stack_rows expects rank-1 tensors");
  for (const Tensor& t : rows)
    if (t.rank() != 1 || t.shape()[0] != width)
      throw DimensionError("stack_rows width mismatch");
  auto out = make_impl(Shape{static_cast<int>(rows.size()), width},
                       std::vector<double>(rows.size() * width));
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::memcpy(out->data.data() + i * width, A::impl(rows[i])->data.data(),
                sizeof(double) * width);
  Tape* tp = Tape::current();
  bool any = false;
  std::vector<bool> tr(rows.size());
  std::vector<ImplPtr> impls(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    impls[i] = A::impl(rows[i]);
    tr[i] = tp && tracked(impls[i], tp);
    any = any || tr[i];
    if (tr[i] && impls[i]->requires_grad) tp->note_leaf(impls[i]);
  }
  if (!(tp && any)) return A::wrap(std::move(out));
  TensorImpl* oraw = out.get();
  return finish(out, tp, true, [=](GradMap& g) {
    const auto* go = out_grad(g, oraw);
    if (go == nullptr) return;
    const double* pg = go->data();
    for (std::size_t i = 0; i < impls.size(); ++i) {
      if (!tr[i]) continue;
      double* gx = sink_buf(g, impls[i].get()).data();
      for (int j = 0; j < width; ++j) gx[j] += pg[i * width + j];
    }
  });
}

Tensor bce_with_logits_mean(const Tensor& logits, const Tensor& targets) {
  const ImplPtr& li = A::impl(logits);
  const ImplPtr& ti = A::impl(targets);
  if (li->shape != ti->shape)
    throw DimensionError("bce shapes differ: " + shape_str(li->shape) + " vs " +
                         shape_str(ti->shape));
  const std::int64_t n = static_cast<std::int64_t>(li->data.size());
  if (n == 0) throw DimensionError("bce on empty tensors");
  const double* pl = li->data.data();
  const double* pt = ti->data.data();
  double sum = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double y = pt[i];
    if (y != 0.0 && y != 1.0) throw InputError("bce target is not binary");
    const double l = pl[i];
    sum += std::max(l, 0.0) - l * y + std::log1p(std::exp(-std::abs(l)));
  }
  auto out = make_impl(Shape{}, std::vector<double>{sum / static_cast<double>(n)});
  Tape* tp = Tape::current();
  if (!(tp && tracked(li, tp))) return A::wrap(std::move(out));
  if (li->requires_grad) tp->note_leaf(li);
  TensorImpl* oraw = out.get();
  return finish(out, tp, true, [=](GradMap& g) {
    const auto* go = out_grad(g, oraw);
    if (go == nullptr) return;
    double* gl = sink_buf(g, li.get()).data();
    const double scale = (*go)[0] / static_cast<double>(n);
    const double* plv = li->data.data();
    const double* ptv = ti->data.data();
    for (std::int64_t i = 0; i < n; ++i) {
      const double v = plv[i];
      const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                : std::exp(v) / (1.0 + std::exp(v));
      gl[i] += scale * (s - ptv[i]);
    }
  });
}

Tensor unary_custom(const Tensor& x, const std::function<double(double)>& fwd,
                    const std::function<double(double)>& dfdx) {
  const ImplPtr& xi = A::impl(x);
  auto out = make_impl(xi->shape, std::vector<double>(xi->data.size()));
  const double* px = xi->data.data();
  double* po = out->data.data();
  const std::int64_t n = static_cast<std::int64_t>(xi->data.size());
  for (std::int64_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
  Tape* tp = Tape::current();
  if (!(tp && tracked(xi, tp))) return A::wrap(std::move(out));
  if (xi->requires_grad) tp->note_leaf(xi);
  TensorImpl* oraw = out.get();
  return finish(out, tp, true, [=](GradMap& g) {
    const auto* go = out_grad(g, oraw);
    if (go == nullptr) return;
    double* gx = sink_buf(g, xi.get()).data();
    const double* pg = go->data();
    const double* pxv = xi->data.data();
    for (std::int64_t i = 0; i < n; ++i) gx[i] += pg[i] * dfdx(pxv[i]);
  });
}

// ---------------------------------------------------------------------------
// ParamStore

Tensor ParamStore::add(const std::string& name, Tensor t) {
  if (index_.count(name)) throw Error("duplicate parameter name: " + name);
  if (!t.requires_grad()) throw Error("parameter " + name + " must require grad");
  index_.emplace(name, entries_.size());
  entries_.emplace_back(name, t);
  return t;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("unknown parameter: " + name);
  return entries_[it->second].second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("unknown parameter: " + name);
  return entries_[it->second].second;
}

bool ParamStore::contains(const std::string& name) const { return index_.count(name) != 0; }

std::int64_t ParamStore::total_size() const {
  std::int64_t n = 0;
  for (const auto& [_, t] : entries_) n += t.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, t] : entries_) t.zero_grad();
}

// ---------------------------------------------------------------------------
// grad_check

double grad_check(const std::function<Tensor(Tensor&)>& f, Tensor& x, double step) {
  if (!x.requires_grad()) throw Error("grad_check input must require grad");
  x.zero_grad();
  std::vector<double> analytic;
  {
    Tape tape;
    Tensor y = f(x);
    if (y.size() != 1) throw Error("grad_check function must return a scalar");
    if (!std::isfinite(y.item())) throw NumericError("grad_check: non-finite value");
    tape.backward(y);
    analytic.assign(x.grad().begin(), x.grad().end());
  }
  // Keep finite-difference evaluations off any ambient tape.
  struct TapePause {
    Tape* saved;
    TapePause() : saved(g_current_tape) { g_current_tape = nullptr; }
    ~TapePause() { g_current_tape = saved; }
  } pause;
  auto scalar_eval = [&]() {
    Tensor y = f(x);
    const double v = y.item();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite perturbed value");
    return v;
  };
  double max_err = 0.0;
  auto xd = x.mutable_data();
  for (std::size_t i = 0; i < xd.size(); ++i) {
    const double orig = xd[i];
    xd[i] = orig + step;
    const double up = scalar_eval();
    xd[i] = orig - step;
    const double dn = scalar_eval();
    xd[i] = orig;
    const double fd = (up - dn) / (2.0 * step);
    const double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace s2rm
