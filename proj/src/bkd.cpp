#include "qsim/bkd.hpp"

#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "qsim/errors.hpp"

namespace qsim {

Mat Mat::from(const Tensor& t) {
  require_rank2(t, "training matrix");
  Mat m(t.rows(), t.cols());
  for (std::size_t i = 0; i < m.v.size(); ++i) m.v[i] = t.data()[i];
  return m;
}

Tensor Mat::to_tensor() const {
  std::vector<float> d(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) d[i] = static_cast<float>(v[i]);
  return Tensor({rows, cols}, std::move(d));
}

InputSource parse_input_source(std::string_view name) {
  if (name == "quantized") return InputSource::kQuantized;
  if (name == "fp") return InputSource::kFullPrecision;
  throw ValidationError(fmt::format("unknown input_source '{}'", name));
}

std::string_view to_string(InputSource s) {
  return s == InputSource::kQuantized ? "quantized" : "fp";
}

ScalingPlan make_plan(ScalerKind kind, const Tensor& w, const Tensor& x_fp, double alpha,
                      bool floor_at_one) {
  switch (kind) {
    case ScalerKind::kNone: return identity_plan(w.rows());
    case ScalerKind::kWeightDilation: return wd_plan(w);
    case ScalerKind::kSmoothQuant:
      return smoothquant_plan(column_absmax(x_fp), w, alpha, floor_at_one);
  }
  return identity_plan(w.rows());
}

QuantBlock calibrate_block(const BlockSpec& fp, const Tensor& x, const TimestepIndex& idx,
                           std::size_t T, const QuantConfig& cfg) {
  QuantBlock qb;
  Tensor a = x;
  for (const auto& layer : fp.layers) {
    const ScalingPlan plan = make_plan(cfg.scaler, layer.weight, a, cfg.sq_alpha, cfg.sq_floor);
    const Tensor xs = scale_activation(a, plan);
    const Tensor ws = scale_weight(layer.weight, plan);
    const auto steps = split_by_timestep(xs, idx, T);
    QuantLayer ql;
    ql.spec = layer.spec;
    ql.scale = plan.s;
    ql.weight = Mat::from(ws);
    ql.bias.assign(layer.bias.begin(), layer.bias.end());
    const QuantParams qw = calibrate(ws, cfg.bits_w, Granularity::kPerOutChannel, cfg.method);
    ql.w_delta = qw.delta;
    ql.w_zero.assign(qw.zero_point.begin(), qw.zero_point.end());
    ql.bits_w = cfg.bits_w;
    ql.act = tpq_init(steps, cfg.bits_a, cfg.method);
    qb.layers.push_back(std::move(ql));
    a = layer_forward_fp(layer, a);
  }
  return qb;
}

namespace {

struct LayerTape {
  Mat xq;
  Mat x_dfac;  // d xq / d delta
  std::vector<std::uint8_t> x_in;
  Mat wq;
  Mat w_dfac;
  std::vector<std::uint8_t> w_in;
  Mat pre;
};

double act_value(Activation a, double y) {
  switch (a) {
    case Activation::kNone: return y;
    case Activation::kRelu: return y > 0.0 ? y : 0.0;
    case Activation::kSilu: return y / (1.0 + std::exp(-y));
  }
  return y;
}

double act_grad(Activation a, double y) {
  switch (a) {
    case Activation::kNone: return 1.0;
    case Activation::kRelu: return y > 0.0 ? 1.0 : 0.0;
    case Activation::kSilu: {
      const double sg = 1.0 / (1.0 + std::exp(-y));
      return sg * (1.0 + y * (1.0 - sg));
    }
  }
  return 1.0;
}

// Quantizes one value and records the pieces the backward pass needs.
inline double quant_site(double x, double delta, double z, double qmax, double& dfac,
                         std::uint8_t& in_range) {
  const double u = x / delta;
  const double r = std::nearbyint(u);
  const double code = r + z;
  double c = code;
  in_range = 1;
  if (code < 0.0) {
    c = 0.0;
    in_range = 0;
  } else if (code > qmax) {
    c = qmax;
    in_range = 0;
  }
  dfac = in_range ? r - u : c - z;
  return delta * (c - z);
}

Mat layer_forward(const QuantLayer& L, const Mat& a, const TimestepIndex& idx, LayerTape* tape) {
  const std::size_t n_rows = a.rows, ci = L.spec.in, co = L.spec.out;
  if (a.cols != ci) {
    throw ShapeError(fmt::format("quantized layer expects {} inputs, got {}", ci, a.cols));
  }
  const double qmax_a = code_max(L.act.bits);
  const double qmax_w = code_max(L.bits_w);

  Mat xq(n_rows, ci), x_dfac, wq(ci, co), w_dfac;
  std::vector<std::uint8_t> x_in, w_in;
  if (tape) {
    x_dfac = Mat(n_rows, ci);
    x_in.resize(n_rows * ci);
    w_dfac = Mat(ci, co);
    w_in.resize(ci * co);
  }
  double dfac;
  std::uint8_t in;
  for (std::size_t n = 0; n < n_rows; ++n) {
    const std::size_t t = idx.t[n] - 1;
    const double d = L.act.delta[t], z = L.act.zero_point[t];
    for (std::size_t i = 0; i < ci; ++i) {
      const double xs = a.at(n, i) / static_cast<double>(L.scale[i]);
      xq.at(n, i) = quant_site(xs, d, z, qmax_a, dfac, in);
      if (tape) {
        x_dfac.at(n, i) = dfac;
        x_in[n * ci + i] = in;
      }
    }
  }
  for (std::size_t i = 0; i < ci; ++i) {
    for (std::size_t j = 0; j < co; ++j) {
      wq.at(i, j) = quant_site(L.weight.at(i, j), L.w_delta[j], L.w_zero[j], qmax_w, dfac, in);
      if (tape) {
        w_dfac.at(i, j) = dfac;
        w_in[i * co + j] = in;
      }
    }
  }
  Mat pre(n_rows, co);
  for (std::size_t n = 0; n < n_rows; ++n) {
    for (std::size_t i = 0; i < ci; ++i) {
      const double xv = xq.at(n, i);
      for (std::size_t j = 0; j < co; ++j) pre.at(n, j) += xv * wq.at(i, j);
    }
    if (!L.bias.empty()) {
      for (std::size_t j = 0; j < co; ++j) pre.at(n, j) += L.bias[j];
    }
  }
  Mat out(n_rows, co);
  for (std::size_t k = 0; k < out.v.size(); ++k) out.v[k] = act_value(L.spec.act, pre.v[k]);
  if (tape) {
    tape->xq = std::move(xq);
    tape->x_dfac = std::move(x_dfac);
    tape->x_in = std::move(x_in);
    tape->wq = std::move(wq);
    tape->w_dfac = std::move(w_dfac);
    tape->w_in = std::move(w_in);
    tape->pre = std::move(pre);
  }
  return out;
}

Mat block_forward(const QuantBlock& q, const Mat& x, const TimestepIndex& idx,
                  std::vector<LayerTape>* tapes) {
  Mat a = x;
  if (tapes) tapes->resize(q.layers.size());
  for (std::size_t l = 0; l < q.layers.size(); ++l) {
    a = layer_forward(q.layers[l], a, idx, tapes ? &(*tapes)[l] : nullptr);
  }
  return a;
}

double mat_mse(const Mat& a, const Mat& b) {
  double acc = 0.0;
  for (std::size_t k = 0; k < a.v.size(); ++k) {
    const double d = a.v[k] - b.v[k];
    acc += d * d;
  }
  return acc / static_cast<double>(a.v.size());
}

void check_block(const QuantBlock& q, std::size_t rows, const TimestepIndex& idx) {
  if (q.layers.empty()) throw ValidationError("quantized block has no layers");
  for (const auto& l : q.layers) l.act.validate();
  idx.validate(q.layers.front().act.T(), rows);
}

BlockGrads backward_impl(const QuantBlock& q, const Mat& x, const TimestepIndex& idx,
                         const Mat& target) {
  std::vector<LayerTape> tapes;
  const Mat out = block_forward(q, x, idx, &tapes);
  if (out.rows != target.rows || out.cols != target.cols) {
    throw ShapeError("bkd target shape does not match block output");
  }
  BlockGrads g;
  g.loss = mat_mse(out, target);
  g.layers.resize(q.layers.size());

  const double norm = 2.0 / static_cast<double>(out.v.size());
  Mat d_out(out.rows, out.cols);
  for (std::size_t k = 0; k < out.v.size(); ++k) d_out.v[k] = norm * (out.v[k] - target.v[k]);

  for (std::size_t l = q.layers.size(); l-- > 0;) {
    const QuantLayer& L = q.layers[l];
    const LayerTape& tp = tapes[l];
    LayerGrads& lg = g.layers[l];
    const std::size_t n_rows = x.rows, ci = L.spec.in, co = L.spec.out;

    Mat dy(n_rows, co);
    for (std::size_t k = 0; k < dy.v.size(); ++k) {
      dy.v[k] = d_out.v[k] * act_grad(L.spec.act, tp.pre.v[k]);
    }
    lg.bias.assign(L.bias.size(), 0.0);
    if (!L.bias.empty()) {
      for (std::size_t n = 0; n < n_rows; ++n) {
        for (std::size_t j = 0; j < co; ++j) lg.bias[j] += dy.at(n, j);
      }
    }
    Mat dwq(ci, co), dxq(n_rows, ci);
    for (std::size_t n = 0; n < n_rows; ++n) {
      for (std::size_t i = 0; i < ci; ++i) {
        const double xv = tp.xq.at(n, i);
        double acc = 0.0;
        for (std::size_t j = 0; j < co; ++j) {
          dwq.at(i, j) += xv * dy.at(n, j);
          acc += dy.at(n, j) * tp.wq.at(i, j);
        }
        dxq.at(n, i) = acc;
      }
    }
    lg.weight = Mat(ci, co);
    lg.w_delta.assign(co, 0.0);
    for (std::size_t i = 0; i < ci; ++i) {
      for (std::size_t j = 0; j < co; ++j) {
        const double gq = dwq.at(i, j);
        if (tp.w_in[i * co + j]) lg.weight.at(i, j) = gq;
        lg.w_delta[j] += gq * tp.w_dfac.at(i, j);
      }
    }
    const std::size_t T = L.act.T();
    lg.act_delta.assign(T, 0.0);
    lg.act_zero.assign(T, 0.0);
    Mat da(n_rows, ci);
    for (std::size_t n = 0; n < n_rows; ++n) {
      const std::size_t t = idx.t[n] - 1;
      const double d = L.act.delta[t];
      for (std::size_t i = 0; i < ci; ++i) {
        const double gq = dxq.at(n, i);
        lg.act_delta[t] += gq * tp.x_dfac.at(n, i);
        if (tp.x_in[n * ci + i]) {
          da.at(n, i) = gq / static_cast<double>(L.scale[i]);
        } else {
          lg.act_zero[t] -= gq * d;
        }
      }
    }
    d_out = std::move(da);
  }
  return g;
}

}  // namespace

Tensor block_forward_q(const QuantBlock& q, const Tensor& x, const TimestepIndex& idx) {
  check_block(q, x.rows(), idx);
  return block_forward(q, Mat::from(x), idx, nullptr).to_tensor();
}

double mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(fmt::format("mse shape mismatch: {} vs {}", shape_str(a.shape()),
                                 shape_str(b.shape())));
  }
  double acc = 0.0;
  for (std::size_t k = 0; k < a.numel(); ++k) {
    const double d = static_cast<double>(a.data()[k]) - b.data()[k];
    acc += d * d;
  }
  return acc / static_cast<double>(a.numel());
}

double bkd_loss(const BlockSpec& fp, const QuantBlock& q, const Tensor& x,
                const TimestepIndex& idx) {
  check_block(q, x.rows(), idx);
  const Mat target = Mat::from(block_forward_fp(fp, x));
  return mat_mse(block_forward(q, Mat::from(x), idx, nullptr), target);
}

BlockGrads bkd_backward(const QuantBlock& q, const Tensor& x, const TimestepIndex& idx,
                        const Tensor& target) {
  check_block(q, x.rows(), idx);
  return backward_impl(q, Mat::from(x), idx, Mat::from(target));
}

BlockGrads bkd_backward(const BlockSpec& fp, const QuantBlock& q, const Tensor& x,
                        const TimestepIndex& idx) {
  return bkd_backward(q, x, idx, block_forward_fp(fp, x));
}

TrainState make_train_state(QuantBlock block, const TrainConfig& cfg) {
  TrainState st;
  st.lr_qparams = cfg.lr_qparams;
  st.lr_weights = cfg.lr_weights;
  for (const auto& l : block.layers) {
    BlockMoments::Layer m;
    const auto zeros = [](std::size_t n) { return AdamSlot{std::vector<double>(n), std::vector<double>(n)}; };
    m.weight = zeros(l.weight.v.size());
    m.bias = zeros(l.bias.size());
    m.w_delta = zeros(l.w_delta.size());
    m.act_delta = zeros(l.act.T());
    m.act_zero = zeros(l.act.T());
    st.moments.layers.push_back(std::move(m));
  }
  st.block = std::move(block);
  return st;
}

namespace {

struct AdamCoeffs {
  double b1, b2, eps, corr1, corr2;
};

inline void adam_lane(double& p, double g, double& m, double& v, double lr, const AdamCoeffs& c) {
  m = c.b1 * m + (1.0 - c.b1) * g;
  v = c.b2 * v + (1.0 - c.b2) * g * g;
  const double mhat = m / c.corr1;
  const double vhat = v / c.corr2;
  p -= lr * mhat / (std::sqrt(vhat) + c.eps);
}

void adam_vec(std::vector<double>& p, const std::vector<double>& g, AdamSlot& s, double lr,
              const AdamCoeffs& c) {
  for (std::size_t k = 0; k < p.size(); ++k) adam_lane(p[k], g[k], s.m[k], s.v[k], lr, c);
}

}  // namespace

void adam_step(TrainState& st, const BlockGrads& g, const std::vector<bool>& present,
               const TrainConfig& cfg) {
  ++st.step;
  const AdamCoeffs c{cfg.beta1, cfg.beta2, cfg.eps, 1.0 - std::pow(cfg.beta1, st.step),
                     1.0 - std::pow(cfg.beta2, st.step)};
  for (std::size_t l = 0; l < st.block.layers.size(); ++l) {
    QuantLayer& L = st.block.layers[l];
    const LayerGrads& lg = g.layers[l];
    auto& m = st.moments.layers[l];
    adam_vec(L.weight.v, lg.weight.v, m.weight, st.lr_weights, c);
    adam_vec(L.bias, lg.bias, m.bias, st.lr_weights, c);
    adam_vec(L.w_delta, lg.w_delta, m.w_delta, st.lr_qparams, c);
    for (double& d : L.w_delta) d = std::max(d, kMinDelta);
    for (std::size_t t = 0; t < L.act.T(); ++t) {
      if (!present[t]) continue;
      adam_lane(L.act.delta[t], lg.act_delta[t], m.act_delta.m[t], m.act_delta.v[t],
                st.lr_qparams, c);
      adam_lane(L.act.zero_point[t], lg.act_zero[t], m.act_zero.m[t], m.act_zero.v[t],
                st.lr_qparams, c);
      L.act.delta[t] = std::max(L.act.delta[t], kMinDelta);
    }
  }
}

namespace {

Mat gather_rows(const Mat& m, const std::vector<std::size_t>& rows) {
  Mat out(rows.size(), m.cols);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy_n(m.v.begin() + static_cast<std::ptrdiff_t>(rows[r] * m.cols), m.cols,
                out.v.begin() + static_cast<std::ptrdiff_t>(r * m.cols));
  }
  return out;
}

}  // namespace

TrainResult bkd_train(const ModelSpec& model, std::vector<QuantBlock> init, const Tensor& x,
                      const TimestepIndex& idx, const TrainConfig& cfg) {
  model.validate();
  if (init.size() != model.blocks.size()) {
    throw ValidationError(fmt::format("{} quantized blocks for a {}-block model", init.size(),
                                      model.blocks.size()));
  }
  if (cfg.iters < 0) throw ValidationError("iters must be >= 0");
  if (cfg.batch_size == 0) throw ValidationError("batch size must be positive");
  idx.validate(model.T, x.rows());
  {
    std::vector<bool> seen(model.T, false);
    for (auto t : idx.t) seen[t - 1] = true;
    for (std::size_t t = 0; t < model.T; ++t) {
      if (!seen[t]) throw ValidationError(fmt::format("training data has no rows for timestep {}", t + 1));
    }
  }

  RngStream rng(cfg.seed, kStreamTrain);
  const std::size_t n_rows = x.rows();
  std::vector<std::size_t> order(n_rows);

  TrainResult res;
  Tensor x_fp = x;
  Tensor x_q = x;
  for (std::size_t k = 0; k < model.blocks.size(); ++k) {
    const BlockSpec& fp = model.blocks[k];
    check_block(init[k], n_rows, idx);
    const Tensor target_t = block_forward_fp(fp, x_fp);
    const Tensor& input_t = cfg.input_source == InputSource::kQuantized ? x_q : x_fp;
    const Mat input = Mat::from(input_t);
    const Mat target = Mat::from(target_t);

    TrainState st = make_train_state(std::move(init[k]), cfg);
    res.loss_before.push_back(mat_mse(block_forward(st.block, input, idx, nullptr), target));

    const bool full_batch = cfg.batch_size >= n_rows;
    const std::size_t bs = full_batch ? n_rows : cfg.batch_size;
    std::vector<std::size_t> rows(bs);
    TimestepIndex bidx;
    bidx.t.resize(bs);
    for (int step = 0; step < cfg.iters; ++step) {
      if (full_batch) {
        std::iota(rows.begin(), rows.end(), std::size_t{0});
      } else {
        // Partial Fisher-Yates: a uniform sample without replacement.
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t r = 0; r < bs; ++r) {
          const std::size_t pick = r + static_cast<std::size_t>(rng.uniform_index(n_rows - r));
          std::swap(order[r], order[pick]);
          rows[r] = order[r];
        }
      }
      std::vector<bool> present(model.T, false);
      for (std::size_t r = 0; r < bs; ++r) {
        bidx.t[r] = idx.t[rows[r]];
        present[bidx.t[r] - 1] = true;
      }
      const BlockGrads g =
          backward_impl(st.block, gather_rows(input, rows), bidx, gather_rows(target, rows));
      if (!std::isfinite(g.loss)) {
        throw NumericalError(
            fmt::format("non-finite loss in block {} at step {}", k + 1, step));
      }
      st.loss_history.push_back(g.loss);
      res.history.push_back({step, k + 1, g.loss});
      adam_step(st, g, present, cfg);
    }
    const double after = mat_mse(block_forward(st.block, input, idx, nullptr), target);
    if (!std::isfinite(after)) {
      throw NumericalError(fmt::format("non-finite loss in block {} after training", k + 1));
    }
    res.loss_after.push_back(after);
    x_q = block_forward_q(st.block, x_q, idx);
    x_fp = target_t;
    res.blocks.push_back(std::move(st.block));
  }
  return res;
}

}  // namespace qsim
