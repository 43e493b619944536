#pragma once

#include <fstream>
#include <string>

#include "tta/adaptation.hpp"
#include "tta/alignment.hpp"
#include "tta/decoder.hpp"
#include "tta/io.hpp"

namespace tta {

// Alignment record: magic "TTAA", version, dim, reference, ref_inv_sqrt,
// mass, omega, floor_events.
inline constexpr char kAlignMagic[4] = {'T', 'T', 'A', 'A'};
inline constexpr char kDecoderMagic[4] = {'T', 'T', 'A', 'D'};
inline constexpr char kSessionMagic[4] = {'T', 'T', 'A', 'S'};
inline constexpr char kTrainMagic[4] = {'T', 'T', 'A', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_aligner(std::ostream& os, const AlignerState& s) {
  io::write_magic(os, kAlignMagic);
  io::write_u32(os, kCheckpointVersion);
  io::write_u32(os, static_cast<std::uint32_t>(s.reference.dim));
  io::write_f64_block(os, s.reference.data);
  io::write_matrix(os, s.ref_inv_sqrt);
  io::write_f64(os, s.mass);
  io::write_f64(os, s.omega);
  io::write_u64(os, s.floor_events);
}

inline AlignerState read_aligner(std::istream& is) {
  io::expect_magic(is, kAlignMagic, "aligner record");
  if (io::read_u32(is) != kCheckpointVersion)
    throw FormatError("unsupported aligner record version");
  AlignerState s;
  const std::uint32_t dim = io::read_u32(is);
  s.reference = SpdMatrix(dim);
  io::read_f64_block(is, s.reference.data);
  s.ref_inv_sqrt = io::read_matrix(is);
  s.mass = io::read_f64(is);
  s.omega = io::read_f64(is);
  s.floor_events = io::read_u64(is);
  if (!is) throw FormatError("truncated aligner record");
  return s;
}

// Decoder record: magic "TTAD", version, C/T placeholder/H/K dims, then
// w1, b1, gamma, beta, w2, b2, bn.mu, bn.var, bn.eps.
inline void write_decoder(std::ostream& os, const DecoderParams& p, const BnState& bn) {
  io::write_magic(os, kDecoderMagic);
  io::write_u32(os, kCheckpointVersion);
  io::write_u32(os, static_cast<std::uint32_t>(p.channels));
  io::write_u32(os, static_cast<std::uint32_t>(p.hidden));
  io::write_u32(os, static_cast<std::uint32_t>(p.classes));
  io::write_f64_block(os, p.w1.data);
  io::write_f64_block(os, p.b1);
  io::write_f64_block(os, p.gamma);
  io::write_f64_block(os, p.beta);
  io::write_f64_block(os, p.w2.data);
  io::write_f64_block(os, p.b2);
  io::write_f64_block(os, bn.mu);
  io::write_f64_block(os, bn.var);
  io::write_f64(os, bn.eps);
}

inline std::pair<DecoderParams, BnState> read_decoder(std::istream& is) {
  io::expect_magic(is, kDecoderMagic, "decoder record");
  if (io::read_u32(is) != kCheckpointVersion)
    throw FormatError("unsupported decoder record version");
  DecoderParams p;
  p.channels = io::read_u32(is);
  p.hidden = io::read_u32(is);
  p.classes = io::read_u32(is);
  p.w1 = Matrix(p.hidden, p.channels);
  io::read_f64_block(is, p.w1.data);
  p.b1.resize(p.hidden);
  io::read_f64_block(is, p.b1);
  p.gamma.resize(p.hidden);
  io::read_f64_block(is, p.gamma);
  p.beta.resize(p.hidden);
  io::read_f64_block(is, p.beta);
  p.w2 = Matrix(p.classes, p.hidden);
  io::read_f64_block(is, p.w2.data);
  p.b2.resize(p.classes);
  io::read_f64_block(is, p.b2);
  BnState bn;
  bn.mu.resize(p.hidden);
  io::read_f64_block(is, bn.mu);
  bn.var.resize(p.hidden);
  io::read_f64_block(is, bn.var);
  bn.eps = io::read_f64(is);
  if (!is) throw FormatError("truncated decoder record");
  return {std::move(p), std::move(bn)};
}

inline void write_adapt_config(std::ostream& os, const AdaptConfig& c) {
  io::write_f64(os, c.eta);
  io::write_f64(os, c.alpha);
  io::write_f64(os, c.omega);
  io::write_f64(os, c.lambda_);
  io::write_f64(os, c.eps);
  io::write_f64(os, c.a_val);
  io::write_u32(os, c.update_mask == UpdateMask::All ? 0u : 1u);
  io::write_u32(os, (c.enable_ea ? 1u : 0u) | (c.enable_bn_update ? 2u : 0u) |
                        (c.enable_loss_update ? 4u : 0u));
  io::write_u32(os, c.bn_forward_mode == BnMode::InferenceRunningStats ? 0u : 1u);
}

inline AdaptConfig read_adapt_config(std::istream& is) {
  AdaptConfig c;
  c.eta = io::read_f64(is);
  c.alpha = io::read_f64(is);
  c.omega = io::read_f64(is);
  c.lambda_ = io::read_f64(is);
  c.eps = io::read_f64(is);
  c.a_val = io::read_f64(is);
  c.update_mask = io::read_u32(is) == 0 ? UpdateMask::All : UpdateMask::BnAffineOnly;
  const std::uint32_t flags = io::read_u32(is);
  c.enable_ea = flags & 1u;
  c.enable_bn_update = flags & 2u;
  c.enable_loss_update = flags & 4u;
  c.bn_forward_mode =
      io::read_u32(is) == 0 ? BnMode::InferenceRunningStats : BnMode::TrainBatchStats;
  if (!is) throw FormatError("truncated adapt-config record");
  return c;
}

// Session checkpoint: aligner + decoder records plus an AdaptConfig echo.
inline void write_session(std::ostream& os, const SessionState& s,
                          const AdaptConfig& cfg) {
  io::write_magic(os, kSessionMagic);
  io::write_u32(os, kCheckpointVersion);
  write_aligner(os, s.aligner);
  write_decoder(os, s.params, s.bn);
  io::write_u64(os, s.skipped_steps);
  write_adapt_config(os, cfg);
}

inline std::pair<SessionState, AdaptConfig> read_session(std::istream& is) {
  io::expect_magic(is, kSessionMagic, "session record");
  if (io::read_u32(is) != kCheckpointVersion)
    throw FormatError("unsupported session record version");
  SessionState s;
  s.aligner = read_aligner(is);
  auto [p, bn] = read_decoder(is);
  s.params = std::move(p);
  s.bn = std::move(bn);
  s.skipped_steps = io::read_u64(is);
  AdaptConfig cfg = read_adapt_config(is);
  return {std::move(s), cfg};
}

struct TrainedState {
  DecoderParams params;
  BnState bn;
  AlignerState aligner;
  double a_val = 0.0;
};

inline void write_trained(const std::string& path, const TrainedState& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for write: " + path);
  io::write_magic(os, kTrainMagic);
  io::write_u32(os, kCheckpointVersion);
  io::write_f64(os, t.a_val);
  write_aligner(os, t.aligner);
  write_decoder(os, t.params, t.bn);
  if (!os) throw IoError("write failed: " + path);
}

inline TrainedState read_trained(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for read: " + path);
  io::expect_magic(is, kTrainMagic, path);
  if (io::read_u32(is) != kCheckpointVersion)
    throw FormatError("unsupported train checkpoint version");
  TrainedState t;
  t.a_val = io::read_f64(is);
  t.aligner = read_aligner(is);
  auto [p, bn] = read_decoder(is);
  t.params = std::move(p);
  t.bn = std::move(bn);
  return t;
}

}  // namespace tta
