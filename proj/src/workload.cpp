#include "attnindex/workload.hpp"

#include <cmath>
#include <cstdint>

#include <Eigen/Dense>

#include "attnindex/util.hpp"

namespace attnindex {

const char* role_name(Role r) {
  switch (r) {
    case Role::Query: return "query";
    case Role::Key: return "key";
    default: return "value";
  }
}

void VectorSet::validate() const {
  if (d < 1) throw std::invalid_argument("VectorSet.d must be >= 1");
  if (data.size() != size_t(n) * d)
    throw std::invalid_argument("VectorSet.data length must equal n*d");
  for (float v : data)
    if (!std::isfinite(v))
      throw std::invalid_argument("VectorSet.data contains non-finite entry");
}

void WorkloadSpec::validate() const {
  if (d_model < 1) throw std::invalid_argument("WorkloadSpec.d_model must be >= 1");
  if (d_head < 1) throw std::invalid_argument("WorkloadSpec.d_head must be >= 1");
  if (d_head > d_model)
    throw std::invalid_argument("WorkloadSpec.d_head must be <= d_model");
  if (n_heads < 1) throw std::invalid_argument("WorkloadSpec.n_heads must be >= 1");
  if (n_kv_groups < 1)
    throw std::invalid_argument("WorkloadSpec.n_kv_groups must be >= 1");
  if (n_heads % n_kv_groups != 0)
    throw std::invalid_argument(
        "WorkloadSpec.n_heads must be divisible by n_kv_groups");
  if (ood_strength < 0)
    throw std::invalid_argument("WorkloadSpec.ood_strength must be >= 0");
  if (!(concentration > 0))
    throw std::invalid_argument("WorkloadSpec.concentration must be > 0");
}

namespace {

using Md = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vd = Eigen::VectorXd;

// hidden-state cone offset and query perturbation, fixed by generator
// calibration (see README); concentration is the runtime knob
constexpr double kMuScale = 2.5;
constexpr double kQueryPerturb = 0.25;

// rng stream tags
enum : uint64_t {
  kMuDir = 1,
  kHidden = 2,
  kPerturb = 3,
  kDecHidden = 4,
  kDecPerturb = 5,
  kProjBase = 6,
  kProjKey = 7,
  kProjValue = 8,
  kCalib = 9,
  kProjQuery = 100,
};

Md sample_normal(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Md m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.normal();
  return m;
}

// rows = mu + G * diag(scale), G standard normal
Md sample_hidden(Rng& rng, Eigen::Index rows, const Vd& mu, const Vd& scale) {
  Md m(rows, mu.size());
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < mu.size(); ++j)
      m(i, j) = mu(j) + rng.normal() * scale(j);
  return m;
}

void add_perturbation(Rng& rng, Md& m, const Vd& scale) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      m(i, j) += kQueryPerturb * rng.normal() * scale(j);
}

VectorSet to_set(Role role, const Md& m) {
  VectorSet s(role, uint64_t(m.rows()), uint32_t(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      s.data[size_t(i) * m.cols() + j] = float(m(i, j));
  return s;
}

}  // namespace

std::vector<HeadWorkload> generate_workload(const WorkloadSpec& spec,
                                            int n_threads) {
  spec.validate();
  uint32_t heads_per_group = spec.n_heads / spec.n_kv_groups;
  std::vector<HeadWorkload> out(spec.n_heads);

  parallel_for(spec.n_kv_groups, n_threads, [&](size_t gi) {
    uint32_t g = uint32_t(gi);
    auto group_rng = [&](uint64_t tag) {
      return Rng(mix_seed(spec.seed, g + 1, tag));
    };

    Vd scale(spec.d_model);
    for (uint32_t j = 0; j < spec.d_model; ++j)
      scale(j) = std::sqrt(1.0 / double(j + 1));

    Rng mu_rng = group_rng(kMuDir);
    Vd mu_dir = sample_normal(mu_rng, spec.d_model, 1).col(0);
    mu_dir.normalize();
    // offset magnitude relative to the expected noise norm
    Vd mu = kMuScale * scale.norm() * mu_dir;

    Rng h_rng = group_rng(kHidden);
    Md h = sample_hidden(h_rng, Eigen::Index(spec.n_ctx), mu, scale);
    Rng p_rng = group_rng(kPerturb);
    Md hq = h;
    add_perturbation(p_rng, hq, scale);
    Rng dh_rng = group_rng(kDecHidden);
    Md hdec = sample_hidden(dh_rng, Eigen::Index(spec.n_decode), mu, scale);
    Rng dp_rng = group_rng(kDecPerturb);
    add_perturbation(dp_rng, hdec, scale);

    double proj_scale = 1.0 / std::sqrt(double(spec.d_model));
    auto sample_proj = [&](uint64_t tag) {
      Rng rng = group_rng(tag);
      return Md(sample_normal(rng, spec.d_model, spec.d_head) * proj_scale);
    };
    double s = spec.ood_strength;
    double mixn = 1.0 / std::sqrt(1.0 + s * s);
    Md w0 = sample_proj(kProjBase);
    Md wk = (w0 + s * sample_proj(kProjKey)) * mixn;
    Md wv = sample_proj(kProjValue);

    Md keys = h * wk;
    Md values = h * wv;

    std::vector<Md> q_prefill(heads_per_group), q_decode(heads_per_group);
    for (uint32_t m = 0; m < heads_per_group; ++m) {
      uint32_t head = g * heads_per_group + m;
      Rng rng(mix_seed(spec.seed, spec.n_kv_groups + head + 1, kProjQuery));
      Md bq = sample_normal(rng, spec.d_model, spec.d_head) * proj_scale;
      Md wq = (w0 + s * bq) * mixn;
      q_prefill[m] = hq * wq;
      q_decode[m] = hdec * wq;
    }

    // joint concentration scaling of queries and keys so the per-query
    // score spread matches spec.concentration; a shared factor keeps the
    // query/key distribution gap intact (ood_strength=0 stays matched)
    double c = 1.0;
    if (spec.n_ctx > 0 && spec.n_heads > 0) {
      Rng cal_rng = group_rng(kCalib);
      uint64_t nq_samp = std::min<uint64_t>(256, spec.n_ctx);
      uint64_t nk_samp = std::min<uint64_t>(8192, spec.n_ctx);
      Md qs(Eigen::Index(nq_samp), spec.d_head);
      for (uint64_t i = 0; i < nq_samp; ++i) {
        uint32_t m = uint32_t(cal_rng.uniform_index(heads_per_group));
        uint64_t r = cal_rng.uniform_index(spec.n_ctx);
        qs.row(Eigen::Index(i)) = q_prefill[m].row(Eigen::Index(r));
      }
      Md ks(Eigen::Index(nk_samp), spec.d_head);
      for (uint64_t i = 0; i < nk_samp; ++i)
        ks.row(Eigen::Index(i)) =
            keys.row(Eigen::Index(cal_rng.uniform_index(spec.n_ctx)));
      Md z = qs * ks.transpose() / std::sqrt(double(spec.d_head));
      double sigma_sum = 0.0;
      for (Eigen::Index i = 0; i < z.rows(); ++i) {
        double mean = z.row(i).mean();
        double var = (z.row(i).array() - mean).square().mean();
        sigma_sum += std::sqrt(var);
      }
      double sigma_raw = sigma_sum / double(z.rows());
      if (sigma_raw > 0) c = std::sqrt(spec.concentration / sigma_raw);
    }

    auto shared_keys =
        std::make_shared<const VectorSet>(to_set(Role::Key, keys * c));
    auto shared_values = std::make_shared<const VectorSet>(to_set(Role::Value, values));
    for (uint32_t m = 0; m < heads_per_group; ++m) {
      uint32_t head = g * heads_per_group + m;
      HeadWorkload& hw = out[head];
      hw.head_id = head;
      hw.kv_group_id = g;
      hw.prefill_queries = to_set(Role::Query, q_prefill[m] * c);
      hw.decode_queries = to_set(Role::Query, q_decode[m] * c);
      hw.keys = shared_keys;
      hw.values = shared_values;
    }
  });

  return out;
}

}  // namespace attnindex
