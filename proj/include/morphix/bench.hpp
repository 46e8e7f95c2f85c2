// Copyright 2026 The Morphix Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "morphix/metrics.hpp"
#include "morphix/pipeline.hpp"

namespace morphix {

struct BenchRow {
  std::string id;
  std::string kind;
  double changed_to_target = 0.0;    // RMS vs target inside the changed cells
  double unchanged_to_target = 0.0;  // RMS vs target elsewhere
  double source_to_target = 0.0;     // same as the first, for the unedited source
  double fd = 0.0;                   // Frechet distance of frame embeddings, output vs target
  double kl = 0.0;
};

/// Request for one triple; its spectrograms are referenced by role name.
inline EditRequest request_for_triple(const EditTriple& t, const EditRequest& defaults) {
  EditRequest r = defaults;
  r.kind = edit_kind_from_string(t.kind);
  r.source = "source";
  r.mask_c = t.mask_c;
  if (t.reference) r.reference = "reference";
  if (t.reference_in) r.reference_in = "reference_in";
  if (t.mask_r) r.mask_r = *t.mask_r;
  r.mask_r_in = t.mask_r_in;
  r.transform = t.transform;
  return r;
}

inline BenchRow bench_triple(const EditTriple& t, const EditRequest& defaults, const ModelHandle& handle) {
  const EditRequest req = request_for_triple(t, defaults);
  const SpectralEditInputs in{t.source, t.reference, t.reference_in, {}};
  const auto res = run_spectral_edit(req, in, handle);
  BenchRow row{t.id, t.kind};
  const auto d = masked_spectral_distance(res.spectrogram, t.target, t.changed);
  row.changed_to_target = d.masked;
  row.unchanged_to_target = d.unmasked;
  row.source_to_target = masked_spectral_distance(t.source, t.target, t.changed).masked;
  const auto go = fit_gaussian(frame_embeddings(res.spectrogram));
  const auto gt = fit_gaussian(frame_embeddings(t.target));
  row.fd = frechet_distance(go, gt);
  row.kl = kl_divergence(go, gt);
  return row;
}

inline std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os.precision(10);
  os << "id,kind,changed_to_target,unchanged_to_target,source_to_target,fd,kl\n";
  for (const auto& r : rows) {
    os << r.id << "," << r.kind << "," << r.changed_to_target << "," << r.unchanged_to_target << ","
       << r.source_to_target << "," << r.fd << "," << r.kl << "\n";
  }
  return os.str();
}

inline nlohmann::json bench_json(const std::vector<BenchRow>& rows) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) {
    j.push_back({{"id", r.id},
                 {"kind", r.kind},
                 {"changed_to_target", r.changed_to_target},
                 {"unchanged_to_target", r.unchanged_to_target},
                 {"source_to_target", r.source_to_target},
                 {"fd", r.fd},
                 {"kl", r.kl}});
  }
  return j;
}

}  // namespace morphix
