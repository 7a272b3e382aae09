#include "oracle.hpp"

#include <cmath>
#include <cstddef>

namespace oracle {

namespace {

// y[m] = x[k] * W[k*m] + b[m]
void fc(const double* x, int k, int m, const Vec& w, const Vec& b, double* y) {
  for (int j = 0; j < m; ++j) {
    double s = 0.0;
    for (int i = 0; i < k; ++i) s += x[i] * w[static_cast<std::size_t>(i) * m + j];
    y[j] = s + b[j];
  }
}

}  // namespace

double gelu1(double x) {
  const double u = std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

void softmax_row(double* p, int n) {
  double m = p[0];
  for (int i = 1; i < n; ++i) {
    if (p[i] > m) m = p[i];
  }
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    p[i] = std::exp(p[i] - m);
    sum += p[i];
  }
  for (int i = 0; i < n; ++i) p[i] /= sum;
}

void layer_norm_row(const double* x, int d, const double* gain,
                    const double* bias, double eps, double* out) {
  double mean = 0.0;
  for (int i = 0; i < d; ++i) mean += x[i];
  mean /= d;
  double var = 0.0;
  for (int i = 0; i < d; ++i) var += (x[i] - mean) * (x[i] - mean);
  var /= d;
  const double inv = 1.0 / std::sqrt(var + eps);
  for (int i = 0; i < d; ++i) out[i] = (x[i] - mean) * inv * gain[i] + bias[i];
}

void interp_weights(int n, int out_n, int i, int* i0, int* i1, double* w0,
                    double* w1) {
  if (n == 1 || out_n == 1) {
    if (n == 1) {
      *i0 = *i1 = 0;
      *w0 = 1.0;
      *w1 = 0.0;
      return;
    }
    *i0 = 0;
    *i1 = 1;
    *w0 = 1.0;
    *w1 = 0.0;
    return;
  }
  const double c = static_cast<double>(i) * (n - 1) / (out_n - 1);
  int lo = static_cast<int>(std::floor(c));
  if (lo > n - 2) lo = n - 2;
  if (lo < 0) lo = 0;
  *i0 = lo;
  *i1 = lo + 1;
  *w1 = c - lo;
  *w0 = 1.0 - *w1;
}

void msa_block(const Vec& tokens, int n, int d, int heads,
               const LayerWeights& w, const Vec* injected, Vec& out_tokens,
               Vec& out_logits) {
  const int dh = d / heads;
  Vec normed(static_cast<std::size_t>(n) * d);
  for (int t = 0; t < n; ++t) {
    layer_norm_row(tokens.data() + static_cast<std::size_t>(t) * d, d,
                   w.ln1_g.data(), w.ln1_b.data(), 1e-6,
                   normed.data() + static_cast<std::size_t>(t) * d);
  }
  Vec q(static_cast<std::size_t>(n) * d), k(q.size()), v(q.size());
  for (int t = 0; t < n; ++t) {
    fc(normed.data() + static_cast<std::size_t>(t) * d, d, d, w.wq, w.bq,
       q.data() + static_cast<std::size_t>(t) * d);
    fc(normed.data() + static_cast<std::size_t>(t) * d, d, d, w.wk, w.bk,
       k.data() + static_cast<std::size_t>(t) * d);
    fc(normed.data() + static_cast<std::size_t>(t) * d, d, d, w.wv, w.bv,
       v.data() + static_cast<std::size_t>(t) * d);
  }
  out_logits.assign(static_cast<std::size_t>(heads) * n * n, 0.0);
  Vec mixed(static_cast<std::size_t>(n) * d, 0.0);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int h = 0; h < heads; ++h) {
    const int col = h * dh;  // head h reads this column range of q/k/v
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        double s = 0.0;
        for (int a = 0; a < dh; ++a) {
          s += q[static_cast<std::size_t>(i) * d + col + a] *
               k[static_cast<std::size_t>(j) * d + col + a];
        }
        out_logits[(static_cast<std::size_t>(h) * n + i) * n + j] = s * inv_sqrt;
      }
    }
    for (int i = 0; i < n; ++i) {
      Vec att(n);
      for (int j = 0; j < n; ++j) {
        att[j] = out_logits[(static_cast<std::size_t>(h) * n + i) * n + j];
        if (injected != nullptr) {
          att[j] += (*injected)[(static_cast<std::size_t>(h) * n + i) * n + j];
        }
      }
      softmax_row(att.data(), n);
      for (int a = 0; a < dh; ++a) {
        double s = 0.0;
        for (int j = 0; j < n; ++j) {
          s += att[j] * v[static_cast<std::size_t>(j) * d + col + a];
        }
        mixed[static_cast<std::size_t>(i) * d + col + a] = s;
      }
    }
  }
  out_tokens.assign(static_cast<std::size_t>(n) * d, 0.0);
  Vec proj(d);
  for (int t = 0; t < n; ++t) {
    fc(mixed.data() + static_cast<std::size_t>(t) * d, d, d, w.wo, w.bo,
       proj.data());
    for (int j = 0; j < d; ++j) {
      out_tokens[static_cast<std::size_t>(t) * d + j] =
          tokens[static_cast<std::size_t>(t) * d + j] + proj[j];
    }
  }
}

void mlp_block(const Vec& tokens, int n, int d, int ctx, int hidden,
               const LayerWeights& w, const Vec* context, Vec& out_tokens) {
  const int din = d + ctx;
  out_tokens.assign(static_cast<std::size_t>(n) * d, 0.0);
  Vec cat(din), normed(din), hid(hidden), out(d);
  for (int t = 0; t < n; ++t) {
    for (int j = 0; j < d; ++j) cat[j] = tokens[static_cast<std::size_t>(t) * d + j];
    for (int j = 0; j < ctx; ++j) {
      cat[d + j] =
          context != nullptr ? (*context)[static_cast<std::size_t>(t) * ctx + j] : 0.0;
    }
    layer_norm_row(cat.data(), din, w.ln2_g.data(), w.ln2_b.data(), 1e-6,
                   normed.data());
    fc(normed.data(), din, hidden, w.w1, w.b1, hid.data());
    for (int j = 0; j < hidden; ++j) hid[j] = gelu1(hid[j]);
    fc(hid.data(), hidden, d, w.w2, w.b2, out.data());
    for (int j = 0; j < d; ++j) {
      out_tokens[static_cast<std::size_t>(t) * d + j] =
          tokens[static_cast<std::size_t>(t) * d + j] + out[j];
    }
  }
}

void build_context_layer(const Vec& up_tokens, int d, int h_up, int w_up,
                         int h_dn, int w_dn, int hidden, int dp,
                         const FeatureWeights& w, Vec& out) {
  const int su = h_up * w_up;
  const int sd = h_dn * w_dn;
  // class token (row 0) is excluded from the context source
  Vec mapped(static_cast<std::size_t>(su) * dp);
  Vec normed(d), hid(hidden);
  for (int t = 0; t < su; ++t) {
    layer_norm_row(up_tokens.data() + static_cast<std::size_t>(t + 1) * d, d,
                   w.ln_g.data(), w.ln_b.data(), 1e-6, normed.data());
    fc(normed.data(), d, hidden, w.w1, w.b1, hid.data());
    for (int j = 0; j < hidden; ++j) hid[j] = gelu1(hid[j]);
    fc(hid.data(), hidden, dp, w.w2, w.b2,
       mapped.data() + static_cast<std::size_t>(t) * dp);
  }
  out.assign(static_cast<std::size_t>(1 + sd) * dp, 0.0);  // zero class row
  for (int oy = 0; oy < h_dn; ++oy) {
    int y0, y1;
    double wy0, wy1;
    interp_weights(h_up, h_dn, oy, &y0, &y1, &wy0, &wy1);
    for (int ox = 0; ox < w_dn; ++ox) {
      int x0, x1;
      double wx0, wx1;
      interp_weights(w_up, w_dn, ox, &x0, &x1, &wx0, &wx1);
      for (int ch = 0; ch < dp; ++ch) {
        const double v =
            wy0 * wx0 * mapped[(static_cast<std::size_t>(y0) * w_up + x0) * dp + ch] +
            wy0 * wx1 * mapped[(static_cast<std::size_t>(y0) * w_up + x1) * dp + ch] +
            wy1 * wx0 * mapped[(static_cast<std::size_t>(y1) * w_up + x0) * dp + ch] +
            wy1 * wx1 * mapped[(static_cast<std::size_t>(y1) * w_up + x1) * dp + ch];
        out[(1 + static_cast<std::size_t>(oy) * w_dn + ox) * dp + ch] = v;
      }
    }
  }
}

namespace {

// weight of source token js in resized token jt (token 0 is the class slot)
double token_weight(int jt, int js, int h_up, int w_up, int h_dn, int w_dn) {
  if (jt == 0 || js == 0) return (jt == 0 && js == 0) ? 1.0 : 0.0;
  const int oy = (jt - 1) / w_dn, ox = (jt - 1) % w_dn;
  const int sy = (js - 1) / w_up, sx = (js - 1) % w_up;
  int y0, y1, x0, x1;
  double wy0, wy1, wx0, wx1;
  interp_weights(h_up, h_dn, oy, &y0, &y1, &wy0, &wy1);
  interp_weights(w_up, w_dn, ox, &x0, &x1, &wx0, &wx1);
  double wy = 0.0;
  if (sy == y0) wy += wy0;
  if (sy == y1) wy += wy1;
  double wx = 0.0;
  if (sx == x0) wx += wx0;
  if (sx == x1) wx += wx1;
  return wy * wx;
}

}  // namespace

void attention_grid_upsample(const Vec& a, int channels, int h_up, int w_up,
                             int h_dn, int w_dn, Vec& out) {
  const int nu = 1 + h_up * w_up;
  const int nd = 1 + h_dn * w_dn;
  // rows first, then columns, matching the two-pass definition
  Vec rows(static_cast<std::size_t>(channels) * nu * nd, 0.0);
  for (int c = 0; c < channels; ++c) {
    for (int i = 0; i < nu; ++i) {
      for (int jt = 0; jt < nd; ++jt) {
        double s = 0.0;
        for (int js = 0; js < nu; ++js) {
          const double w = token_weight(jt, js, h_up, w_up, h_dn, w_dn);
          if (w != 0.0) {
            s += w * a[(static_cast<std::size_t>(c) * nu + i) * nu + js];
          }
        }
        rows[(static_cast<std::size_t>(c) * nu + i) * nd + jt] = s;
      }
    }
  }
  out.assign(static_cast<std::size_t>(channels) * nd * nd, 0.0);
  for (int c = 0; c < channels; ++c) {
    for (int it = 0; it < nd; ++it) {
      for (int j = 0; j < nd; ++j) {
        double s = 0.0;
        for (int is = 0; is < nu; ++is) {
          const double w = token_weight(it, is, h_up, w_up, h_dn, w_dn);
          if (w != 0.0) {
            s += w * rows[(static_cast<std::size_t>(c) * nu + is) * nd + j];
          }
        }
        out[(static_cast<std::size_t>(c) * nd + it) * nd + j] = s;
      }
    }
  }
}

void transform_relationships(const Vec& stack, int heads, int layers, int h_up,
                             int w_up, int h_dn, int w_dn,
                             const RelationshipWeights& w, Vec& out) {
  const int c = heads * layers;
  const int nu = 1 + h_up * w_up;
  const int nd = 1 + h_dn * w_dn;
  Vec refined(static_cast<std::size_t>(nu) * nu * c);
  Vec hid(3 * c);
  for (int i = 0; i < nu * nu; ++i) {
    fc(stack.data() + static_cast<std::size_t>(i) * c, c, 3 * c, w.w1, w.b1,
       hid.data());
    for (int j = 0; j < 3 * c; ++j) hid[j] = gelu1(hid[j]);
    fc(hid.data(), 3 * c, c, w.w2, w.b2,
       refined.data() + static_cast<std::size_t>(i) * c);
  }
  // channel-major view [c][nu][nu] for the resize
  Vec per_channel(static_cast<std::size_t>(c) * nu * nu);
  for (int i = 0; i < nu; ++i) {
    for (int j = 0; j < nu; ++j) {
      for (int ch = 0; ch < c; ++ch) {
        per_channel[(static_cast<std::size_t>(ch) * nu + i) * nu + j] =
            refined[(static_cast<std::size_t>(i) * nu + j) * c + ch];
      }
    }
  }
  Vec resized;
  attention_grid_upsample(per_channel, c, h_up, w_up, h_dn, w_dn, resized);
  // output channel order: layer l, head h at [l][h]
  out.assign(static_cast<std::size_t>(c) * nd * nd, 0.0);
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < nd * nd; ++i) {
      out[static_cast<std::size_t>(ch) * nd * nd + i] =
          resized[static_cast<std::size_t>(ch) * nd * nd + i];
    }
  }
}

}  // namespace oracle
