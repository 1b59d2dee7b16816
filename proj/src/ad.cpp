#include "stag/ad.hpp"

#include <cmath>

#include "stag/kernels.hpp"

namespace stag::ad {

namespace {

void check_same_shape(const Mat& a, const Mat& b, const char* who) {
  if (!a.same_shape(b))
    throw ValidationError(std::string(who) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace

Mat& Graph::gref(int id) {
  Node& n = nodes_[id];
  if (n.grad.empty() && n.val.size() > 0) n.grad = Mat(n.val.rows, n.val.cols);
  return n.grad;
}

void Graph::accumulate(int id, const Mat& g) {
  Mat& dst = gref(id);
  check_same_shape(dst, g, "ad::accumulate");
  for (size_t i = 0; i < dst.a.size(); ++i) dst.a[i] += g.a[i];
}

Var Graph::constant(Mat v) { return push(std::move(v), false); }

Var Graph::param(Mat* storage, const std::string& name) {
  if (!storage) throw ValidationError("ad::param: null storage");
  Var v = push(*storage, true);
  params_.push_back(ParamRef{name, storage, v.id});
  return v;
}

Mat Graph::grad_of(Var v) const {
  const Node& n = nodes_[check(v)];
  if (n.grad.empty()) return Mat(n.val.rows, n.val.cols);
  return n.grad;
}

Var Graph::add(Var a, Var b) {
  check_same_shape(val(a), val(b), "ad::add");
  Mat out = val(a);
  const Mat& vb = val(b);
  for (size_t i = 0; i < out.a.size(); ++i) out.a[i] += vb.a[i];
  Var y = push(std::move(out), req(a) || req(b));
  if (!nodes_[y.id].needs_grad) return y;
  int ia = a.id, ib = b.id, iy = y.id;
  bool ra = req(a), rb = req(b);
  nodes_[y.id].back = [this, ia, ib, iy, ra, rb] {
    const Mat& g = nodes_[iy].grad;
    if (ra) accumulate(ia, g);
    if (rb) accumulate(ib, g);
  };
  return y;
}

Var Graph::sub(Var a, Var b) {
  check_same_shape(val(a), val(b), "ad::sub");
  Mat out = val(a);
  const Mat& vb = val(b);
  for (size_t i = 0; i < out.a.size(); ++i) out.a[i] -= vb.a[i];
  Var y = push(std::move(out), req(a) || req(b));
  if (!nodes_[y.id].needs_grad) return y;
  int ia = a.id, ib = b.id, iy = y.id;
  bool ra = req(a), rb = req(b);
  nodes_[y.id].back = [this, ia, ib, iy, ra, rb] {
    const Mat& g = nodes_[iy].grad;
    if (ra) accumulate(ia, g);
    if (rb) {
      Mat neg = g;
      for (double& v : neg.a) v = -v;
      accumulate(ib, neg);
    }
  };
  return y;
}

Var Graph::hadamard(Var a, Var b) {
  check_same_shape(val(a), val(b), "ad::hadamard");
  Mat out = val(a);
  const Mat& vb = val(b);
  for (size_t i = 0; i < out.a.size(); ++i) out.a[i] *= vb.a[i];
  Var y = push(std::move(out), req(a) || req(b));
  if (!nodes_[y.id].needs_grad) return y;
  int ia = a.id, ib = b.id, iy = y.id;
  bool ra = req(a), rb = req(b);
  nodes_[y.id].back = [this, ia, ib, iy, ra, rb] {
    const Mat& g = nodes_[iy].grad;
    if (ra) {
      Mat da = g;
      const Mat& vb2 = nodes_[ib].val;
      for (size_t i = 0; i < da.a.size(); ++i) da.a[i] *= vb2.a[i];
      accumulate(ia, da);
    }
    if (rb) {
      Mat db = g;
      const Mat& va2 = nodes_[ia].val;
      for (size_t i = 0; i < db.a.size(); ++i) db.a[i] *= va2.a[i];
      accumulate(ib, db);
    }
  };
  return y;
}

Var Graph::affine(Var x, double mul, double shift) {
  Mat out = val(x);
  for (double& v : out.a) v = mul * v + shift;
  Var y = push(std::move(out), req(x));
  if (!nodes_[y.id].needs_grad) return y;
  int ix = x.id, iy = y.id;
  nodes_[y.id].back = [this, ix, iy, mul] {
    Mat g = nodes_[iy].grad;
    for (double& v : g.a) v *= mul;
    accumulate(ix, g);
  };
  return y;
}

Var Graph::scale_by(Var x, Var s) {
  if (val(s).rows != 1 || val(s).cols != 1) throw ValidationError("ad::scale_by: scale must be 1x1");
  double sv = val(s)(0, 0);
  Mat out = val(x);
  for (double& v : out.a) v *= sv;
  Var y = push(std::move(out), req(x) || req(s));
  if (!nodes_[y.id].needs_grad) return y;
  int ix = x.id, is = s.id, iy = y.id;
  bool rx = req(x), rs = req(s);
  nodes_[y.id].back = [this, ix, is, iy, rx, rs] {
    const Mat& g = nodes_[iy].grad;
    double sv2 = nodes_[is].val(0, 0);
    if (rx) {
      Mat dx = g;
      for (double& v : dx.a) v *= sv2;
      accumulate(ix, dx);
    }
    if (rs) {
      const Mat& vx = nodes_[ix].val;
      double ds = 0.0;
      for (size_t i = 0; i < g.a.size(); ++i) ds += g.a[i] * vx.a[i];
      accumulate(is, Mat::scalar(ds));
    }
  };
  return y;
}

Var Graph::add_rowvec(Var X, Var r) {
  const Mat& vx = val(X);
  const Mat& vr = val(r);
  if (vr.rows != 1 || vr.cols != vx.cols) throw ValidationError("ad::add_rowvec: shape mismatch");
  Mat out = vx;
  for (int i = 0; i < out.rows; ++i)
    for (int j = 0; j < out.cols; ++j) out(i, j) += vr(0, j);
  Var y = push(std::move(out), req(X) || req(r));
  if (!nodes_[y.id].needs_grad) return y;
  int ix = X.id, ir = r.id, iy = y.id;
  bool rx = req(X), rr = req(r);
  nodes_[y.id].back = [this, ix, ir, iy, rx, rr] {
    const Mat& g = nodes_[iy].grad;
    if (rx) accumulate(ix, g);
    if (rr) {
      Mat dr(1, g.cols);
      for (int i = 0; i < g.rows; ++i)
        for (int j = 0; j < g.cols; ++j) dr(0, j) += g(i, j);
      accumulate(ir, dr);
    }
  };
  return y;
}

Var Graph::col_scale(Var X, Var c) {
  const Mat& vx = val(X);
  const Mat& vc = val(c);
  if (vc.cols != 1 || vc.rows != vx.rows) throw ValidationError("ad::col_scale: scale must be Nx1");
  Mat out = vx;
  for (int i = 0; i < out.rows; ++i)
    for (int j = 0; j < out.cols; ++j) out(i, j) *= vc(i, 0);
  Var y = push(std::move(out), req(X) || req(c));
  if (!nodes_[y.id].needs_grad) return y;
  int ix = X.id, ic = c.id, iy = y.id;
  bool rx = req(X), rc = req(c);
  nodes_[y.id].back = [this, ix, ic, iy, rx, rc] {
    const Mat& g = nodes_[iy].grad;
    if (rx) {
      Mat dx = g;
      const Mat& vc2 = nodes_[ic].val;
      for (int i = 0; i < dx.rows; ++i)
        for (int j = 0; j < dx.cols; ++j) dx(i, j) *= vc2(i, 0);
      accumulate(ix, dx);
    }
    if (rc) {
      const Mat& vx2 = nodes_[ix].val;
      Mat dc(g.rows, 1);
      for (int i = 0; i < g.rows; ++i) {
        double s = 0.0;
        for (int j = 0; j < g.cols; ++j) s += g(i, j) * vx2(i, j);
        dc(i, 0) = s;
      }
      accumulate(ic, dc);
    }
  };
  return y;
}

Var Graph::matmul(Var a, Var b, bool ta, bool tb) {
  Mat out;
  kernels::matmul(val(a), ta, val(b), tb, out);
  Var y = push(std::move(out), req(a) || req(b));
  if (!nodes_[y.id].needs_grad) return y;
  int ia = a.id, ib = b.id, iy = y.id;
  bool ra = req(a), rb = req(b);
  nodes_[y.id].back = [this, ia, ib, iy, ta, tb, ra, rb] {
    const Mat& g = nodes_[iy].grad;
    const Mat& va = nodes_[ia].val;
    const Mat& vb = nodes_[ib].val;
    Mat d;
    if (!ta && !tb) {
      if (ra) {
        kernels::matmul(g, false, vb, true, d);
        accumulate(ia, d);
      }
      if (rb) {
        kernels::matmul(va, true, g, false, d);
        accumulate(ib, d);
      }
    } else if (!ta && tb) {
      if (ra) {
        kernels::matmul(g, false, vb, false, d);
        accumulate(ia, d);
      }
      if (rb) {
        kernels::matmul(g, true, va, false, d);
        accumulate(ib, d);
      }
    } else {  // ta && !tb
      if (ra) {
        kernels::matmul(vb, false, g, true, d);
        accumulate(ia, d);
      }
      if (rb) {
        kernels::matmul(va, false, g, false, d);
        accumulate(ib, d);
      }
    }
  };
  return y;
}

Var Graph::concat_cols(const std::vector<Var>& xs) {
  if (xs.empty()) throw ValidationError("ad::concat_cols: empty input");
  int rows = val(xs[0]).rows;
  int cols = 0;
  for (Var v : xs) {
    if (val(v).rows != rows) throw ValidationError("ad::concat_cols: row mismatch");
    cols += val(v).cols;
  }
  Mat out(rows, cols);
  int off = 0;
  bool needs = false;
  for (Var v : xs) {
    const Mat& m = val(v);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < m.cols; ++j) out(i, off + j) = m(i, j);
    off += m.cols;
    needs = needs || req(v);
  }
  Var y = push(std::move(out), needs);
  if (!nodes_[y.id].needs_grad) return y;
  std::vector<int> ids;
  std::vector<bool> reqs;
  for (Var v : xs) {
    ids.push_back(v.id);
    reqs.push_back(req(v));
  }
  int iy = y.id;
  nodes_[y.id].back = [this, ids, reqs, iy] {
    const Mat& g = nodes_[iy].grad;
    int off2 = 0;
    for (size_t k = 0; k < ids.size(); ++k) {
      const Mat& vk = nodes_[ids[k]].val;
      if (reqs[k]) {
        Mat dk(vk.rows, vk.cols);
        for (int i = 0; i < vk.rows; ++i)
          for (int j = 0; j < vk.cols; ++j) dk(i, j) = g(i, off2 + j);
        accumulate(ids[k], dk);
      }
      off2 += vk.cols;
    }
  };
  return y;
}

Var Graph::mean_of(const std::vector<Var>& xs) {
  if (xs.empty()) throw ValidationError("ad::mean_of: empty input");
  Mat out = val(xs[0]);
  bool needs = req(xs[0]);
  for (size_t k = 1; k < xs.size(); ++k) {
    check_same_shape(out, val(xs[k]), "ad::mean_of");
    const Mat& m = val(xs[k]);
    for (size_t i = 0; i < out.a.size(); ++i) out.a[i] += m.a[i];
    needs = needs || req(xs[k]);
  }
  double inv = 1.0 / static_cast<double>(xs.size());
  for (double& v : out.a) v *= inv;
  Var y = push(std::move(out), needs);
  if (!nodes_[y.id].needs_grad) return y;
  std::vector<int> ids;
  std::vector<bool> reqs;
  for (Var v : xs) {
    ids.push_back(v.id);
    reqs.push_back(req(v));
  }
  int iy = y.id;
  nodes_[y.id].back = [this, ids, reqs, iy, inv] {
    Mat g = nodes_[iy].grad;
    for (double& v : g.a) v *= inv;
    for (size_t k = 0; k < ids.size(); ++k)
      if (reqs[k]) accumulate(ids[k], g);
  };
  return y;
}

Var Graph::gather_rows(Var X, std::vector<int> idx) {
  const Mat& vx = val(X);
  Mat out(static_cast<int>(idx.size()), vx.cols);
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= vx.rows) throw ValidationError("ad::gather_rows: index out of range");
    for (int j = 0; j < vx.cols; ++j) out(static_cast<int>(i), j) = vx(idx[i], j);
  }
  Var y = push(std::move(out), req(X));
  if (!nodes_[y.id].needs_grad) return y;
  int ix = X.id, iy = y.id;
  nodes_[y.id].back = [this, ix, iy, idx = std::move(idx)] {
    const Mat& g = nodes_[iy].grad;
    Mat dx(nodes_[ix].val.rows, nodes_[ix].val.cols);
    // Serial scatter-add keeps accumulation order fixed.
    for (size_t i = 0; i < idx.size(); ++i)
      for (int j = 0; j < g.cols; ++j) dx(idx[i], j) += g(static_cast<int>(i), j);
    accumulate(ix, dx);
  };
  return y;
}

Var Graph::substitute_rows(Var X, std::vector<int> rows, Var rep) {
  const Mat& vx = val(X);
  const Mat& vr = val(rep);
  if (vr.rows != 1 || vr.cols != vx.cols) throw ValidationError("ad::substitute_rows: replacement must be 1xC");
  Mat out = vx;
  std::vector<char> hit(vx.rows, 0);
  for (int r : rows) {
    if (r < 0 || r >= vx.rows) throw ValidationError("ad::substitute_rows: row out of range");
    hit[r] = 1;
    for (int j = 0; j < vx.cols; ++j) out(r, j) = vr(0, j);
  }
  Var y = push(std::move(out), req(X) || req(rep));
  if (!nodes_[y.id].needs_grad) return y;
  int ix = X.id, ir = rep.id, iy = y.id;
  bool rx = req(X), rr = req(rep);
  nodes_[y.id].back = [this, ix, ir, iy, rx, rr, hit = std::move(hit)] {
    const Mat& g = nodes_[iy].grad;
    if (rx) {
      Mat dx = g;
      for (int i = 0; i < dx.rows; ++i)
        if (hit[i])
          for (int j = 0; j < dx.cols; ++j) dx(i, j) = 0.0;
      accumulate(ix, dx);
    }
    if (rr) {
      Mat dr(1, g.cols);
      for (int i = 0; i < g.rows; ++i)
        if (hit[i])
          for (int j = 0; j < g.cols; ++j) dr(0, j) += g(i, j);
      accumulate(ir, dr);
    }
  };
  return y;
}

Var Graph::segment_sum(Var X, SegmentPlan plan) {
  const Mat& vx = val(X);
  if (plan.num_rows() != vx.rows) throw ValidationError("ad::segment_sum: plan does not cover input rows");
  Mat out(plan.num_segments(), vx.cols);
#pragma omp parallel for schedule(static)
  for (int s = 0; s < plan.num_segments(); ++s)
    for (int r = plan.offsets[s]; r < plan.offsets[s + 1]; ++r)
      for (int j = 0; j < vx.cols; ++j) out(s, j) += vx(r, j);
  Var y = push(std::move(out), req(X));
  if (!nodes_[y.id].needs_grad) return y;
  int ix = X.id, iy = y.id;
  nodes_[y.id].back = [this, ix, iy, plan = std::move(plan)] {
    const Mat& g = nodes_[iy].grad;
    Mat dx(nodes_[ix].val.rows, nodes_[ix].val.cols);
    for (int s = 0; s < plan.num_segments(); ++s)
      for (int r = plan.offsets[s]; r < plan.offsets[s + 1]; ++r)
        for (int j = 0; j < g.cols; ++j) dx(r, j) = g(s, j);
    accumulate(ix, dx);
  };
  return y;
}

Var Graph::segment_softmax(Var logits, SegmentPlan plan) {
  const Mat& vl = val(logits);
  if (vl.cols != 1) throw ValidationError("ad::segment_softmax: logits must be Nx1");
  if (plan.num_rows() != vl.rows) throw ValidationError("ad::segment_softmax: plan does not cover input rows");
  Mat out(vl.rows, 1);
#pragma omp parallel for schedule(static)
  for (int s = 0; s < plan.num_segments(); ++s) {
    int lo = plan.offsets[s], hi = plan.offsets[s + 1];
    if (lo == hi) continue;
    double mx = vl(lo, 0);
    for (int r = lo + 1; r < hi; ++r) mx = std::max(mx, vl(r, 0));
    double z = 0.0;
    for (int r = lo; r < hi; ++r) {
      out(r, 0) = std::exp(vl(r, 0) - mx);
      z += out(r, 0);
    }
    for (int r = lo; r < hi; ++r) out(r, 0) /= z;
  }
  Var y = push(std::move(out), req(logits));
  if (!nodes_[y.id].needs_grad) return y;
  int ix = logits.id, iy = y.id;
  nodes_[y.id].back = [this, ix, iy, plan = std::move(plan)] {
    const Mat& g = nodes_[iy].grad;
    const Mat& yv = nodes_[iy].val;
    Mat dx(yv.rows, 1);
    for (int s = 0; s < plan.num_segments(); ++s) {
      int lo = plan.offsets[s], hi = plan.offsets[s + 1];
      double dot = 0.0;
      for (int r = lo; r < hi; ++r) dot += g(r, 0) * yv(r, 0);
      for (int r = lo; r < hi; ++r) dx(r, 0) = yv(r, 0) * (g(r, 0) - dot);
    }
    accumulate(ix, dx);
  };
  return y;
}

Var Graph::l2_normalize_rows(Var X) {
  Mat out;
  kernels::l2_normalize_rows(val(X), out);
  Var y = push(std::move(out), req(X));
  if (!nodes_[y.id].needs_grad) return y;
  int ix = X.id, iy = y.id;
  nodes_[y.id].back = [this, ix, iy] {
    const Mat& g = nodes_[iy].grad;
    const Mat& vx = nodes_[ix].val;
    Mat dx(vx.rows, vx.cols);
    for (int i = 0; i < vx.rows; ++i) {
      double n = vx.row_norm(i);
      double dot = 0.0;
      for (int j = 0; j < vx.cols; ++j) dot += g(i, j) * vx(i, j);
      double n3 = n * n * n;
      for (int j = 0; j < vx.cols; ++j) dx(i, j) = g(i, j) / n - vx(i, j) * dot / n3;
    }
    accumulate(ix, dx);
  };
  return y;
}

Var Graph::softmax_rows(Var X) {
  Mat out;
  kernels::softmax_rows(val(X), out);
  Var y = push(std::move(out), req(X));
  if (!nodes_[y.id].needs_grad) return y;
  int ix = X.id, iy = y.id;
  nodes_[y.id].back = [this, ix, iy] {
    const Mat& g = nodes_[iy].grad;
    const Mat& yv = nodes_[iy].val;
    Mat dx(yv.rows, yv.cols);
    for (int i = 0; i < yv.rows; ++i) {
      double dot = 0.0;
      for (int j = 0; j < yv.cols; ++j) dot += g(i, j) * yv(i, j);
      for (int j = 0; j < yv.cols; ++j) dx(i, j) = yv(i, j) * (g(i, j) - dot);
    }
    accumulate(ix, dx);
  };
  return y;
}

Var Graph::rows_dot(Var a, Var b) {
  check_same_shape(val(a), val(b), "ad::rows_dot");
  const Mat& va = val(a);
  const Mat& vb = val(b);
  Mat out(va.rows, 1);
  for (int i = 0; i < va.rows; ++i) {
    double s = 0.0;
    for (int j = 0; j < va.cols; ++j) s += va(i, j) * vb(i, j);
    out(i, 0) = s;
  }
  Var y = push(std::move(out), req(a) || req(b));
  if (!nodes_[y.id].needs_grad) return y;
  int ia = a.id, ib = b.id, iy = y.id;
  bool ra = req(a), rb = req(b);
  nodes_[y.id].back = [this, ia, ib, iy, ra, rb] {
    const Mat& g = nodes_[iy].grad;
    const Mat& va2 = nodes_[ia].val;
    const Mat& vb2 = nodes_[ib].val;
    if (ra) {
      Mat da(va2.rows, va2.cols);
      for (int i = 0; i < va2.rows; ++i)
        for (int j = 0; j < va2.cols; ++j) da(i, j) = g(i, 0) * vb2(i, j);
      accumulate(ia, da);
    }
    if (rb) {
      Mat db(vb2.rows, vb2.cols);
      for (int i = 0; i < vb2.rows; ++i)
        for (int j = 0; j < vb2.cols; ++j) db(i, j) = g(i, 0) * va2(i, j);
      accumulate(ib, db);
    }
  };
  return y;
}

Var Graph::cosine_rows(Var a, Var b) { return rows_dot(l2_normalize_rows(a), l2_normalize_rows(b)); }

Var Graph::sum_all(Var x) {
  double s = 0.0;
  for (double v : val(x).a) s += v;
  Var y = push(Mat::scalar(s), req(x));
  if (!nodes_[y.id].needs_grad) return y;
  int ix = x.id, iy = y.id;
  nodes_[y.id].back = [this, ix, iy] {
    double g = nodes_[iy].grad(0, 0);
    Mat dx(nodes_[ix].val.rows, nodes_[ix].val.cols, g);
    accumulate(ix, dx);
  };
  return y;
}

Var Graph::mean_all(Var x) {
  size_t n = val(x).size();
  if (n == 0) throw ValidationError("ad::mean_all: empty input");
  return affine(sum_all(x), 1.0 / static_cast<double>(n), 0.0);
}

Var Graph::activation(Var x, Act act, Var prelu_slope) {
  if (act == Act::relu) {
    Mat out = val(x);
    for (double& v : out.a) v = v > 0.0 ? v : 0.0;
    Var y = push(std::move(out), req(x));
    if (!nodes_[y.id].needs_grad) return y;
    int ix = x.id, iy = y.id;
    nodes_[y.id].back = [this, ix, iy] {
      const Mat& g = nodes_[iy].grad;
      const Mat& vx = nodes_[ix].val;
      Mat dx(vx.rows, vx.cols);
      for (size_t i = 0; i < dx.a.size(); ++i) dx.a[i] = vx.a[i] > 0.0 ? g.a[i] : 0.0;
      accumulate(ix, dx);
    };
    return y;
  }
  if (act == Act::elu) {
    Mat out = val(x);
    for (double& v : out.a) v = v > 0.0 ? v : std::expm1(v);
    Var y = push(std::move(out), req(x));
    if (!nodes_[y.id].needs_grad) return y;
    int ix = x.id, iy = y.id;
    nodes_[y.id].back = [this, ix, iy] {
      const Mat& g = nodes_[iy].grad;
      const Mat& vx = nodes_[ix].val;
      Mat dx(vx.rows, vx.cols);
      for (size_t i = 0; i < dx.a.size(); ++i) dx.a[i] = g.a[i] * (vx.a[i] > 0.0 ? 1.0 : std::exp(vx.a[i]));
      accumulate(ix, dx);
    };
    return y;
  }
  // prelu: slope is a learnable 1x1
  if (!prelu_slope.valid()) throw ValidationError("ad::activation: prelu requires a slope");
  if (val(prelu_slope).rows != 1 || val(prelu_slope).cols != 1)
    throw ValidationError("ad::activation: prelu slope must be 1x1");
  double sv = val(prelu_slope)(0, 0);
  Mat out = val(x);
  for (double& v : out.a) v = v > 0.0 ? v : sv * v;
  Var y = push(std::move(out), req(x) || req(prelu_slope));
  if (!nodes_[y.id].needs_grad) return y;
  int ix = x.id, is = prelu_slope.id, iy = y.id;
  bool rx = req(x), rs = req(prelu_slope);
  nodes_[y.id].back = [this, ix, is, iy, rx, rs] {
    const Mat& g = nodes_[iy].grad;
    const Mat& vx = nodes_[ix].val;
    double sv2 = nodes_[is].val(0, 0);
    if (rx) {
      Mat dx(vx.rows, vx.cols);
      for (size_t i = 0; i < dx.a.size(); ++i) dx.a[i] = g.a[i] * (vx.a[i] > 0.0 ? 1.0 : sv2);
      accumulate(ix, dx);
    }
    if (rs) {
      double ds = 0.0;
      for (size_t i = 0; i < g.a.size(); ++i)
        if (vx.a[i] <= 0.0) ds += g.a[i] * vx.a[i];
      accumulate(is, Mat::scalar(ds));
    }
  };
  return y;
}

Var Graph::leaky_relu(Var x, double slope) {
  Mat out = val(x);
  for (double& v : out.a) v = v > 0.0 ? v : slope * v;
  Var y = push(std::move(out), req(x));
  if (!nodes_[y.id].needs_grad) return y;
  int ix = x.id, iy = y.id;
  nodes_[y.id].back = [this, ix, iy, slope] {
    const Mat& g = nodes_[iy].grad;
    const Mat& vx = nodes_[ix].val;
    Mat dx(vx.rows, vx.cols);
    for (size_t i = 0; i < dx.a.size(); ++i) dx.a[i] = g.a[i] * (vx.a[i] > 0.0 ? 1.0 : slope);
    accumulate(ix, dx);
  };
  return y;
}

Var Graph::sigmoid(Var x) {
  Mat out = val(x);
  for (double& v : out.a) v = 1.0 / (1.0 + std::exp(-v));
  Var y = push(std::move(out), req(x));
  if (!nodes_[y.id].needs_grad) return y;
  int ix = x.id, iy = y.id;
  nodes_[y.id].back = [this, ix, iy] {
    const Mat& g = nodes_[iy].grad;
    const Mat& yv = nodes_[iy].val;
    Mat dx(yv.rows, yv.cols);
    for (size_t i = 0; i < dx.a.size(); ++i) dx.a[i] = g.a[i] * yv.a[i] * (1.0 - yv.a[i]);
    accumulate(ix, dx);
  };
  return y;
}

Var Graph::log_(Var x) {
  Mat out = val(x);
  for (double& v : out.a) {
    if (v <= 0.0) throw RuntimeFailure("ad::log: non-positive input");
    v = std::log(v);
  }
  Var y = push(std::move(out), req(x));
  if (!nodes_[y.id].needs_grad) return y;
  int ix = x.id, iy = y.id;
  nodes_[y.id].back = [this, ix, iy] {
    const Mat& g = nodes_[iy].grad;
    const Mat& vx = nodes_[ix].val;
    Mat dx(vx.rows, vx.cols);
    for (size_t i = 0; i < dx.a.size(); ++i) dx.a[i] = g.a[i] / vx.a[i];
    accumulate(ix, dx);
  };
  return y;
}

Var Graph::exp_(Var x) {
  Mat out = val(x);
  for (double& v : out.a) v = std::exp(v);
  Var y = push(std::move(out), req(x));
  if (!nodes_[y.id].needs_grad) return y;
  int ix = x.id, iy = y.id;
  nodes_[y.id].back = [this, ix, iy] {
    const Mat& g = nodes_[iy].grad;
    const Mat& yv = nodes_[iy].val;
    Mat dx(yv.rows, yv.cols);
    for (size_t i = 0; i < dx.a.size(); ++i) dx.a[i] = g.a[i] * yv.a[i];
    accumulate(ix, dx);
  };
  return y;
}

Var Graph::pow_clamped(Var x, double p) {
  if (p < 1.0) throw ValidationError("ad::pow_clamped: exponent must be >= 1");
  Mat out = val(x);
  for (double& v : out.a) v = std::pow(v > 0.0 ? v : 0.0, p);
  Var y = push(std::move(out), req(x));
  if (!nodes_[y.id].needs_grad) return y;
  int ix = x.id, iy = y.id;
  nodes_[y.id].back = [this, ix, iy, p] {
    const Mat& g = nodes_[iy].grad;
    const Mat& vx = nodes_[ix].val;
    Mat dx(vx.rows, vx.cols);
    for (size_t i = 0; i < dx.a.size(); ++i) {
      double u = vx.a[i];
      dx.a[i] = u > 0.0 ? g.a[i] * p * std::pow(u, p - 1.0) : 0.0;
    }
    accumulate(ix, dx);
  };
  return y;
}

Var Graph::detach(Var x) { return push(val(x), false); }

Var Graph::kl_rowmean(const Mat& P, Var Q) {
  const Mat& vq = val(Q);
  check_same_shape(P, vq, "ad::kl_rowmean");
  if (P.rows == 0) throw ValidationError("ad::kl_rowmean: empty input");
  double total = 0.0;
  for (int i = 0; i < P.rows; ++i)
    for (int j = 0; j < P.cols; ++j) {
      double p = P(i, j);
      if (p <= 0.0) continue;
      double q = vq(i, j);
      if (q <= 0.0) throw RuntimeFailure("ad::kl_rowmean: zero mass in Q where P has mass");
      total += p * (std::log(p) - std::log(q));
    }
  double inv = 1.0 / static_cast<double>(P.rows);
  Var y = push(Mat::scalar(total * inv), req(Q));
  if (!nodes_[y.id].needs_grad) return y;
  int iq = Q.id, iy = y.id;
  nodes_[y.id].back = [this, iq, iy, P, inv] {
    double g = nodes_[iy].grad(0, 0);
    const Mat& vq2 = nodes_[iq].val;
    Mat dq(vq2.rows, vq2.cols);
    for (int i = 0; i < vq2.rows; ++i)
      for (int j = 0; j < vq2.cols; ++j) {
        double p = P(i, j);
        if (p > 0.0) dq(i, j) = -g * inv * p / vq2(i, j);
      }
    accumulate(iq, dq);
  };
  return y;
}

void Graph::backward(Var loss) {
  int il = check(loss);
  const Mat& lv = nodes_[il].val;
  if (lv.rows != 1 || lv.cols != 1) throw ValidationError("ad::backward: loss must be 1x1");
  gref(il)(0, 0) = 1.0;
  for (int id = il; id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.back && !n.grad.empty()) n.back();
  }
}

}  // namespace stag::ad
