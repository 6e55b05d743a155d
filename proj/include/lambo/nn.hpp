#pragma once

#include <cmath>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "lambo/autodiff.hpp"
#include "lambo/rng.hpp"
#include "lambo/vocab.hpp"

namespace lambo::nn {

struct EmptyPlan : std::runtime_error {
  EmptyPlan() : std::runtime_error("mlm_loss: no corrupted positions") {}
};
struct AllTokensBanned : std::runtime_error {
  AllTokensBanned() : std::runtime_error("sample_proposals: every token banned at a position") {}
};
using EmptyIndexSet = ad::EmptySelection;

struct ArchitectureConfig {
  std::size_t kernel_width = 5;
  std::size_t channels = 64;
  std::size_t latent_dim = 16;
  std::size_t shared_encoder_blocks = 3;
  std::size_t disc_encoder_blocks = 1;
  std::size_t decoder_blocks = 3;
};

// Fixed sinusoidal position table, (t_max, channels).
inline Tensor sinusoidal_posenc(std::size_t t_max, std::size_t channels) {
  Tensor pe({t_max, channels});
  for (std::size_t p = 0; p < t_max; ++p)
    for (std::size_t i = 0; i < channels / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) /
                                                 static_cast<double>(channels));
      pe.at2(p, 2 * i) = std::sin(static_cast<double>(p) * freq);
      pe.at2(p, 2 * i + 1) = std::cos(static_cast<double>(p) * freq);
    }
  return pe;
}

struct ResidualBlockParams {
  Tensor ln1_gain, ln1_bias, conv1_w, conv1_b;
  Tensor ln2_gain, ln2_bias, conv2_w, conv2_b;
};

// All learnable DAE tensors. The position table is a fixed function of
// position and channel, not a parameter.
struct DAEParams {
  ArchitectureConfig arch;
  std::size_t vocab_size = 0;
  std::size_t t_max = 0;

  Tensor embedding;  // v x channels
  Tensor posenc;     // t_max x channels (fixed)
  std::vector<ResidualBlockParams> enc_blocks;
  Tensor enc_out_w, enc_out_b;  // channels -> d
  Tensor disc_in_w, disc_in_b;  // d -> channels
  std::vector<ResidualBlockParams> disc_blocks;
  Tensor disc_out_w, disc_out_b;  // channels -> d
  Tensor dec_in_w, dec_in_b;      // 2d -> channels
  std::vector<ResidualBlockParams> dec_blocks;
  Tensor dec_out_w, dec_out_b;  // channels -> v

  template <typename Fn>
  void visit(Fn&& fn) {
    fn("embedding", embedding);
    auto blocks = [&](const char* prefix, std::vector<ResidualBlockParams>& bs) {
      for (std::size_t i = 0; i < bs.size(); ++i) {
        const std::string p = std::string(prefix) + std::to_string(i) + ".";
        fn((p + "ln1_gain").c_str(), bs[i].ln1_gain);
        fn((p + "ln1_bias").c_str(), bs[i].ln1_bias);
        fn((p + "conv1_w").c_str(), bs[i].conv1_w);
        fn((p + "conv1_b").c_str(), bs[i].conv1_b);
        fn((p + "ln2_gain").c_str(), bs[i].ln2_gain);
        fn((p + "ln2_bias").c_str(), bs[i].ln2_bias);
        fn((p + "conv2_w").c_str(), bs[i].conv2_w);
        fn((p + "conv2_b").c_str(), bs[i].conv2_b);
      }
    };
    blocks("enc.", enc_blocks);
    fn("enc_out_w", enc_out_w);
    fn("enc_out_b", enc_out_b);
    fn("disc_in_w", disc_in_w);
    fn("disc_in_b", disc_in_b);
    blocks("disc.", disc_blocks);
    fn("disc_out_w", disc_out_w);
    fn("disc_out_b", disc_out_b);
    fn("dec_in_w", dec_in_w);
    fn("dec_in_b", dec_in_b);
    blocks("dec.", dec_blocks);
    fn("dec_out_w", dec_out_w);
    fn("dec_out_b", dec_out_b);
  }
};

inline ResidualBlockParams init_block(Rng& rng, std::size_t channels, std::size_t k) {
  ResidualBlockParams b;
  const double w_std = std::sqrt(2.0 / static_cast<double>(channels * k));
  b.ln1_gain = Tensor::full({channels}, 1.0);
  b.ln1_bias = Tensor::zeros({channels});
  b.conv1_w = rng.normal_tensor({channels, channels, k}, 0.0, w_std);
  b.conv1_b = Tensor::zeros({channels});
  b.ln2_gain = Tensor::full({channels}, 1.0);
  b.ln2_bias = Tensor::zeros({channels});
  b.conv2_w = rng.normal_tensor({channels, channels, k}, 0.0, w_std);
  b.conv2_b = Tensor::zeros({channels});
  return b;
}

inline DAEParams init_dae_params(Rng& rng, std::size_t vocab_size, std::size_t t_max,
                                 const ArchitectureConfig& arch = {}) {
  DAEParams p;
  p.arch = arch;
  p.vocab_size = vocab_size;
  p.t_max = t_max;
  const std::size_t c = arch.channels, d = arch.latent_dim, k = arch.kernel_width;
  p.embedding = rng.normal_tensor({vocab_size, c}, 0.0, 0.1);
  p.posenc = sinusoidal_posenc(t_max, c);
  for (std::size_t i = 0; i < arch.shared_encoder_blocks; ++i)
    p.enc_blocks.push_back(init_block(rng, c, k));
  auto lin = [&](std::size_t out, std::size_t in) {
    return rng.normal_tensor({out, in}, 0.0, std::sqrt(1.0 / static_cast<double>(in)));
  };
  p.enc_out_w = lin(d, c);
  p.enc_out_b = Tensor::zeros({d});
  p.disc_in_w = lin(c, d);
  p.disc_in_b = Tensor::zeros({c});
  for (std::size_t i = 0; i < arch.disc_encoder_blocks; ++i)
    p.disc_blocks.push_back(init_block(rng, c, k));
  p.disc_out_w = lin(d, c);
  p.disc_out_b = Tensor::zeros({d});
  p.dec_in_w = lin(c, 2 * d);
  p.dec_in_b = Tensor::zeros({c});
  for (std::size_t i = 0; i < arch.decoder_blocks; ++i)
    p.dec_blocks.push_back(init_block(rng, c, k));
  p.dec_out_w = lin(vocab_size, c);
  p.dec_out_b = Tensor::zeros({vocab_size});
  return p;
}

// Tape-lifted parameter handles; leaves when trainable, constants otherwise.
struct BlockVars {
  ad::Var ln1_gain, ln1_bias, conv1_w, conv1_b, ln2_gain, ln2_bias, conv2_w, conv2_b;
};

struct DAEVars {
  const DAEParams* params = nullptr;
  ad::Var embedding;
  std::vector<BlockVars> enc_blocks, disc_blocks, dec_blocks;
  ad::Var enc_out_w, enc_out_b, disc_in_w, disc_in_b, disc_out_w, disc_out_b;
  ad::Var dec_in_w, dec_in_b, dec_out_w, dec_out_b;
  std::vector<std::pair<std::string, ad::Var>> named;  // trainable order matches visit()
};

inline DAEVars lift(ad::Tape& tape, DAEParams& params, bool trainable) {
  DAEVars v;
  v.params = &params;
  std::vector<ad::Var> vars;
  params.visit([&](const char* name, Tensor& t) {
    ad::Var var = trainable ? tape.leaf(t) : tape.constant(t);
    vars.push_back(var);
    v.named.emplace_back(name, var);
  });
  std::size_t i = 0;
  auto next = [&] { return vars[i++]; };
  v.embedding = next();
  auto blocks = [&](std::size_t count) {
    std::vector<BlockVars> out;
    for (std::size_t b = 0; b < count; ++b) {
      BlockVars bv;
      bv.ln1_gain = next();
      bv.ln1_bias = next();
      bv.conv1_w = next();
      bv.conv1_b = next();
      bv.ln2_gain = next();
      bv.ln2_bias = next();
      bv.conv2_w = next();
      bv.conv2_b = next();
      out.push_back(bv);
    }
    return out;
  };
  v.enc_blocks = blocks(params.enc_blocks.size());
  v.enc_out_w = next();
  v.enc_out_b = next();
  v.disc_in_w = next();
  v.disc_in_b = next();
  v.disc_blocks = blocks(params.disc_blocks.size());
  v.disc_out_w = next();
  v.disc_out_b = next();
  v.dec_in_w = next();
  v.dec_in_b = next();
  v.dec_blocks = blocks(params.dec_blocks.size());
  v.dec_out_w = next();
  v.dec_out_b = next();
  return v;
}

inline Tensor make_mask(const std::vector<seq::TokenSequence>& seqs,
                        const seq::Vocabulary& vocab) {
  const std::size_t n = seqs.size(), t = seqs.empty() ? 0 : seqs[0].t_max();
  Tensor mask({n, t});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < t; ++p)
      mask.at2(b, p) = (seqs[b].ids[p] == vocab.padding_id()) ? 0.0 : 1.0;
  return mask;
}

// zero out padded rows of an (n, t, C) tensor
inline ad::Var mask_rows(ad::Var x, const Tensor& mask) {
  const std::size_t n = x.val().dim(0), t = x.val().dim(1), c = x.val().dim(2);
  Tensor expanded({n, t, c});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < t; ++p)
      for (std::size_t j = 0; j < c; ++j) expanded.at3(b, p, j) = mask.at2(b, p);
  return ad::mul_const(x, std::move(expanded));
}

// Pre-activation residual block: LN -> swish -> conv -> LN -> swish -> conv, plus skip.
inline ad::Var residual_block(ad::Var x, const BlockVars& b, const Tensor& mask) {
  ad::Var h = ad::layer_norm(x, b.ln1_gain, b.ln1_bias, mask);
  h = ad::swish(h);
  h = ad::conv1d_masked(h, b.conv1_w, b.conv1_b, mask);
  h = ad::layer_norm(h, b.ln2_gain, b.ln2_bias, mask);
  h = ad::swish(h);
  h = ad::conv1d_masked(h, b.conv2_w, b.conv2_b, mask);
  return ad::add(x, h);
}

// Shared encoder g: token + position embeddings, residual conv stack, linear
// projection to the latent width. Padded rows of the output are zero.
inline ad::Var encode(ad::Tape& tape, const DAEVars& v,
                      const std::vector<seq::TokenSequence>& seqs,
                      const seq::Vocabulary& vocab) {
  Tensor mask = make_mask(seqs, vocab);
  std::vector<std::vector<std::size_t>> ids;
  ids.reserve(seqs.size());
  for (const auto& s : seqs) ids.push_back(s.ids);
  ad::Var h = ad::embed(v.embedding, ids, mask, &v.params->posenc);
  for (const auto& b : v.enc_blocks) h = residual_block(h, b, mask);
  h = ad::linear(h, v.enc_out_w, v.enc_out_b);
  return mask_rows(h, mask);
}

// Discriminative encoder w: latent -> channels -> residual block(s) -> latent.
inline ad::Var disc_encode(ad::Var z, const DAEVars& v, const Tensor& mask) {
  ad::Var h = ad::linear(z, v.disc_in_w, v.disc_in_b);
  h = mask_rows(h, mask);
  for (const auto& b : v.disc_blocks) h = residual_block(h, b, mask);
  h = ad::linear(h, v.disc_out_w, v.disc_out_b);
  return mask_rows(h, mask);
}

// Sequence-level features: mean of token embeddings over non-padding positions.
inline ad::Var pool(ad::Var zp, const Tensor& mask) { return ad::masked_mean_pool(zp, mask); }

// MLM decoder head h over the channel-concatenation of Z and Z'.
inline ad::Var mlm_logits(ad::Var z, ad::Var zp, const DAEVars& v, const Tensor& mask) {
  ad::Var h = ad::concat_lastdim(z, zp);
  h = ad::linear(h, v.dec_in_w, v.dec_in_b);
  h = mask_rows(h, mask);
  for (const auto& b : v.dec_blocks) h = residual_block(h, b, mask);
  return ad::linear(h, v.dec_out_w, v.dec_out_b);
}

inline Tensor plan_selection(const std::vector<seq::CorruptionPlan>& plans, std::size_t n,
                             std::size_t t) {
  Tensor sel({n, t});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p : plans[b].positions) sel.at2(b, p) = 1.0;
  return sel;
}

// Mean cross entropy between the original tokens and the predictive
// distribution at the corrupted positions.
inline ad::Var mlm_loss(ad::Var logits, const std::vector<seq::TokenSequence>& originals,
                        const std::vector<seq::CorruptionPlan>& plans) {
  const std::size_t n = logits.val().dim(0), t = logits.val().dim(1);
  std::size_t total = 0;
  for (const auto& p : plans) total += p.positions.size();
  if (total == 0) throw EmptyPlan();
  std::vector<std::vector<std::size_t>> targets;
  targets.reserve(n);
  for (const auto& s : originals) targets.push_back(s.ids);
  return ad::cross_entropy_masked(logits, targets, plan_selection(plans, n, t));
}

// Mean Shannon entropy of the proposal distribution over the eligible positions.
inline ad::Var proposal_entropy(ad::Var logits, const Tensor& eligible) {
  return ad::entropy_masked(logits, eligible);
}

// Draw replacement tokens at plan positions from the renormalized,
// ban-filtered per-position categoricals. Bans: the original token at that
// position, the specials, and any caller-provided extra ids.
inline seq::TokenSequence sample_proposals(const Tensor& logits_row_major,  // (t, v)
                                           const seq::TokenSequence& base,
                                           const seq::CorruptionPlan& plan,
                                           const std::set<seq::TokenId>& extra_banned,
                                           const seq::Vocabulary& vocab, Rng& rng) {
  seq::TokenSequence out = base;
  const std::size_t v = vocab.size();
  std::vector<double> p(v);
  for (std::size_t pos : plan.positions) {
    ad::detail::softmax_row(logits_row_major.data() + pos * v, p.data(), v);
    for (std::size_t j = 0; j < v; ++j) {
      if (vocab.is_special(j) || j == base.ids[pos] || extra_banned.count(j)) p[j] = 0.0;
    }
    double total = 0.0;
    for (double x : p) total += x;
    if (total <= 0.0) throw AllTokensBanned();
    out.ids[pos] = rng.categorical(p);
  }
  return out;
}

}  // namespace lambo::nn
