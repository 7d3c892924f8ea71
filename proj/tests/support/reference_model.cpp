// SPDX-License-Identifier: Apache-2.0

#include "reference_model.hpp"

#include <cmath>
#include <limits>

namespace refimpl {

using invllava::TokenId;

Mat to_mat(const invllava::Tensor& t) {
  const std::size_t r = t.rows();
  const std::size_t c = t.rank() == 1 ? 1 : t.cols();
  Mat m(r, std::vector<double>(c));
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) m[i][j] = t.values()[i * c + j];
  }
  return m;
}

Mat matmul(const Mat& a, const Mat& b) {
  const std::size_t n = a.size(), k = b.size(), m = b.empty() ? 0 : b[0].size();
  Mat c(n, std::vector<double>(m, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < k; ++t) s += a[i][t] * b[t][j];
      c[i][j] = s;
    }
  }
  return c;
}

Mat transpose(const Mat& a) {
  if (a.empty()) return {};
  Mat t(a[0].size(), std::vector<double>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a[0].size(); ++j) t[j][i] = a[i][j];
  }
  return t;
}

double max_abs_diff(const Mat& a, const invllava::Tensor& t) {
  const Mat b = to_mat(t);
  if (a.size() != b.size() || (!a.empty() && a[0].size() != b[0].size())) {
    return std::numeric_limits<double>::infinity();
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a[i].size(); ++j) {
      worst = std::max(worst, std::abs(a[i][j] - b[i][j]));
    }
  }
  return worst;
}

namespace {

Mat add(const Mat& a, const Mat& b) {
  Mat c = a;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a[i].size(); ++j) c[i][j] += b[i][j];
  }
  return c;
}

Mat scaled(const Mat& a, double s) {
  Mat c = a;
  for (auto& row : c) {
    for (double& v : row) v *= s;
  }
  return c;
}

Mat add_bias(const Mat& a, const invllava::Tensor& bias) {
  Mat c = a;
  for (std::size_t i = 0; i < c.size(); ++i) {
    for (double& v : c[i]) v += bias.values()[i];
  }
  return c;
}

Mat layer_norm(const Mat& x, const invllava::Tensor& g, const invllava::Tensor& b) {
  const std::size_t d = x.size(), n = x[0].size();
  Mat y(d, std::vector<double>(n));
  for (std::size_t c = 0; c < n; ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < d; ++r) mean += x[r][c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t r = 0; r < d; ++r) var += (x[r][c] - mean) * (x[r][c] - mean);
    var /= static_cast<double>(d);
    for (std::size_t r = 0; r < d; ++r) {
      y[r][c] = g.values()[r] * (x[r][c] - mean) / std::sqrt(var + 1e-5) + b.values()[r];
    }
  }
  return y;
}

Mat gelu(const Mat& x) {
  Mat y = x;
  const double k = std::sqrt(2.0 / M_PI);
  for (auto& row : y) {
    for (double& v : row) v = 0.5 * v * (1.0 + std::tanh(k * (v + 0.044715 * v * v * v)));
  }
  return y;
}

bool visible(std::size_t q, std::size_t k, std::size_t p) {
  if (q < p) return k < p;
  return k < p || k <= q;
}

Mat attention(const Mat& q, const Mat& k, const Mat& v, std::size_t heads, std::size_t p,
              const invllava::Tensor& w_o) {
  const std::size_t d = q.size(), n = q[0].size(), dk = d / heads;
  Mat out(d, std::vector<double>(n, 0.0));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> w(n, 0.0);
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        if (!visible(i, j, p)) continue;
        double s = 0.0;
        for (std::size_t r = 0; r < dk; ++r) s += q[h * dk + r][i] * k[h * dk + r][j];
        w[j] = s / std::sqrt(static_cast<double>(dk));
        mx = std::max(mx, w[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        w[j] = visible(i, j, p) ? std::exp(w[j] - mx) : 0.0;
        z += w[j];
      }
      for (std::size_t r = 0; r < dk; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += v[h * dk + r][j] * w[j] / z;
        out[h * dk + r][i] = s;
      }
    }
  }
  return matmul(to_mat(w_o), out);
}

Mat initial_hidden(const invllava::BaseLM& base, std::size_t p,
                   const std::vector<TokenId>& tokens) {
  const std::size_t d = base.config().d_h, n = p + tokens.size();
  const Mat table = to_mat(base.token_embedding());
  Mat h(d, std::vector<double>(n, 0.0));
  for (std::size_t pos = 0; pos < n; ++pos) {
    for (std::size_t i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d));
      h[i][pos] = i % 2 == 0 ? std::sin(pos * freq) : std::cos(pos * freq);
      if (pos >= p) h[i][pos] += table[static_cast<std::size_t>(tokens[pos - p])][i];
    }
  }
  return h;
}

struct LayerExtra {
  const invllava::FusionLayerParams* fusion = nullptr;
  const invllava::LayerLora* lora = nullptr;
};

Mat lora_delta(const invllava::LoraAdapter& ad, const Mat& x) {
  return scaled(matmul(to_mat(ad.b), matmul(to_mat(ad.a), x)), ad.scale);
}

Mat run(const invllava::BaseLM& base, Mat h, std::size_t p, const Mat* v_emb,
        const std::vector<LayerExtra>& extras) {
  const auto& cfg = base.config();
  const std::size_t n = h[0].size();
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& w = base.layers()[l];
    const Mat x = layer_norm(h, w.ln1_gain, w.ln1_bias);
    Mat q = matmul(to_mat(w.w_q), x);
    Mat k = matmul(to_mat(w.w_k), x);
    Mat v = matmul(to_mat(w.w_v), x);
    const LayerExtra ex = extras.empty() ? LayerExtra{} : extras[l];
    if (ex.fusion != nullptr) {
      const auto& fp = *ex.fusion;
      const Mat t = add_bias(matmul(to_mat(fp.w_t2v), x), fp.b_t2v);
      const std::size_t dv = t.size();
      // Rows 0..dv-1: projected text at text slots; rows dv..: vision at vision slots.
      Mat joint(2 * dv, std::vector<double>(n, 0.0));
      for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t r = 0; r < dv; ++r) {
          if (c >= p) joint[r][c] = t[r][c];
          else joint[dv + r][c] = (*v_emb)[r][c];
        }
      }
      q = add(q, scaled(matmul(to_mat(fp.w_concat_q), joint), fp.alpha_q.item()));
      k = add(k, scaled(matmul(to_mat(fp.w_concat_k), joint), fp.alpha_k.item()));
      v = add(v, scaled(matmul(to_mat(fp.w_concat_v), joint), fp.alpha_v.item()));
    } else if (ex.lora != nullptr && ex.lora->q.a.defined()) {
      q = add(q, lora_delta(ex.lora->q, x));
      v = add(v, lora_delta(ex.lora->v, x));
    }
    h = add(h, attention(q, k, v, cfg.n_heads, p, w.w_o));
    const Mat x2 = layer_norm(h, w.ln2_gain, w.ln2_bias);
    const Mat f = add_bias(
        matmul(to_mat(w.w_ff2), gelu(add_bias(matmul(to_mat(w.w_ff1), x2), w.b_ff1))), w.b_ff2);
    h = add(h, f);
  }
  return add_bias(matmul(to_mat(base.lm_head()), h), base.lm_head_bias());
}

}  // namespace

Mat inverse_logits(const invllava::InverseLlava& model, const Mat& v_emb,
                   const std::vector<TokenId>& tokens) {
  const auto& cfg = model.config();
  const std::size_t p = v_emb.empty() ? 0 : v_emb[0].size();
  std::vector<LayerExtra> extras(cfg.n_layers);
  std::size_t f = 0;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    if (cfg.is_fusion_layer(l + 1)) extras[l].fusion = &model.fusion()[f++];
    else extras[l].lora = &model.lora()[l];
  }
  return run(model.base(), initial_hidden(model.base(), p, tokens), p, &v_emb, extras);
}

Mat baseline_logits(const invllava::LlavaBaseline& model, const Mat& v_emb,
                    const std::vector<TokenId>& tokens) {
  const auto& cfg = model.config();
  const std::size_t p = v_emb.empty() ? 0 : v_emb[0].size();
  const auto& pw = model.projector();
  Mat proj = add_bias(matmul(to_mat(pw.w1), v_emb), pw.b1);
  if (!pw.linear) proj = add_bias(matmul(to_mat(pw.w2), gelu(proj)), pw.b2);
  Mat h = initial_hidden(model.base(), p, tokens);
  for (std::size_t r = 0; r < h.size(); ++r) {
    for (std::size_t c = 0; c < p; ++c) h[r][c] += proj[r][c];
  }
  std::vector<LayerExtra> extras(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) extras[l].lora = &model.lora()[l];
  return run(model.base(), h, p, nullptr, extras);
}

Mat base_logits(const invllava::BaseLM& base, std::size_t p, const std::vector<TokenId>& tokens) {
  return run(base, initial_hidden(base, p, tokens), p, nullptr, {});
}

Mat encode(const invllava::VisionEncoder& enc, const invllava::PatchGrid& image,
           invllava::VisionStage stage) {
  const std::size_t d = enc.encoder_dim(), raw = enc.raw_dim(), p = image.n_patches;
  const auto& w1 = enc.stage1_weights();
  const auto& w2 = enc.stage2_weights();
  Mat pen(d, std::vector<double>(p)), fin(d, std::vector<double>(p));
  for (std::size_t j = 0; j < p; ++j) {
    for (std::size_t r = 0; r < d; ++r) {
      double s = 0.0;
      for (std::size_t t = 0; t < raw; ++t) s += w1[r * raw + t] * image.features[j * raw + t];
      pen[r][j] = std::tanh(s);
    }
    for (std::size_t r = 0; r < d; ++r) {
      double s = 0.0;
      for (std::size_t t = 0; t < d; ++t) s += w2[r * d + t] * pen[t][j];
      fin[r][j] = s;
    }
  }
  if (stage == invllava::VisionStage::final) return fin;
  if (stage == invllava::VisionStage::penultimate) return pen;
  Mat both = pen;
  both.insert(both.end(), fin.begin(), fin.end());
  return both;
}

}  // namespace refimpl
