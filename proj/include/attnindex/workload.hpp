#pragma once

#include <vector>

#include "attnindex/types.hpp"

namespace attnindex {

// Synthesizes per-head query/key/value sets that reproduce the
// query-vs-key distribution gap of attention projections:
//   H    = mu + G * D            anisotropic hidden states, eigenvalues 1/i
//   H'   = H + eps * G' * D      query-side perturbation
//   Wk   = (W0 + s*Bk) / sqrt(1+s^2)   per kv group
//   Wq_h = (W0 + s*Bq_h) / sqrt(1+s^2) per query head, s = ood_strength
//   K = H*Wk, Q = H'*Wq_h, decode queries from fresh hidden rows
// then scales Q and K jointly per group so the mean per-query std of
// z = q.k/sqrt(d_head) equals spec.concentration. Pure function of the
// spec: identical output for any thread count.
std::vector<HeadWorkload> generate_workload(const WorkloadSpec& spec,
                                            int n_threads = 1);

}  // namespace attnindex
