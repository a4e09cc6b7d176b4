#include "planted.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

#include "cdlab/ops.hpp"
#include "cdlab/rng.hpp"

namespace cdlab::testing {

namespace {

constexpr double kCodeScale = 1.5;
constexpr double kJitter = 0.1;
constexpr double kOffTask = -50.0;

std::vector<std::array<double, 3>> country_codes(std::size_t n, Rng& rng) {
  const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<std::array<double, 3>> pts;
  for (double a : {-1.0, 1.0}) {
    for (double b : {-phi, phi}) {
      pts.push_back({0.0, a, b});
      pts.push_back({a, b, 0.0});
      pts.push_back({b, 0.0, a});
    }
  }
  while (pts.size() < n) pts.push_back({rng.normal(), rng.normal(), rng.normal()});
  pts.resize(n);
  for (auto& p : pts) {
    const double norm = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
    for (auto& v : p) v *= kCodeScale / norm;
  }
  return pts;
}

std::vector<std::array<double, 2>> continent_codes(std::size_t n) {
  std::vector<std::array<double, 2>> pts;
  for (std::size_t k = 0; k < n; ++k) {
    const double t = 6.283185307179586 * (static_cast<double>(k) + 0.5) / static_cast<double>(n);
    pts.push_back({kCodeScale * std::cos(t), kCodeScale * std::sin(t)});
  }
  return pts;
}

}  // namespace

PlantedTask make_planted_task(std::uint64_t seed, WorldParams params) {
  PlantedTask t;
  params.seed = seed;
  t.world = generate_world(params);
  Rng rng(seed * 7919 + 1);
  constexpr auto d = PlantedTask::kDim;

  Eigen::MatrixXd g(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) g(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  std::vector<double> rv(d * d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) rv[i * d + j] = q(i, j);
  t.r_true = Tensor({d, d}, std::move(rv));

  const auto& v = t.world.vocab;
  auto cc = country_codes(params.n_countries, rng);
  auto kc = continent_codes(params.n_continents);
  auto country_index = [&](TokenId id) { return std::stoul(v.word(id).substr(8)); };
  auto continent_index = [&](TokenId id) { return std::stoul(v.word(id).substr(10)); };
  for (const auto& f : t.world.facts) {
    std::vector<double> z(d);
    const auto& c = cc[country_index(f.country)];
    const auto& k = kc[continent_index(f.continent)];
    for (int i = 0; i < 3; ++i) z[i] = c[i] + kJitter * rng.normal();
    for (int i = 0; i < 2; ++i) z[3 + i] = k[i] + kJitter * rng.normal();
    for (std::size_t i = 5; i < d; ++i) z[i] = rng.normal();
    t.z.emplace(f.city, Tensor::vector(std::move(z)));
  }
  t.split = split_examples(generate_examples(t.world.facts), seed + 1);
  return t;
}

PlantedBackend::PlantedBackend(const PlantedTask& task, double beta) : task_(task) {
  constexpr auto d = PlantedTask::kDim;
  const auto& vocab = task.world.vocab;
  const auto V = vocab.size();
  std::map<Attribute, std::map<TokenId, std::vector<double>>> centroid;
  std::map<Attribute, std::map<TokenId, int>> count;
  for (const auto& f : task.world.facts) {
    facts_.emplace(f.city, f);
    const auto& z = task.z.at(f.city).values();
    for (auto a : kAttributes) {
      auto& c = centroid[a][f.attribute(a)];
      c.resize(d, 0.0);
      const std::size_t lo = a == Attribute::Country ? 0 : PlantedTask::kCountryDims;
      const std::size_t hi = a == Attribute::Country
                                 ? PlantedTask::kCountryDims
                                 : PlantedTask::kCountryDims + PlantedTask::kContinentDims;
      for (std::size_t i = lo; i < hi; ++i) c[i] += z[i];
      ++count[a][f.attribute(a)];
    }
    // h = R_trueᵀ z
    NoGradGuard no_grad;
    h_.emplace(f.city, ops::reshape(ops::matmul(ops::reshape(task.z.at(f.city), {1, d}), task.r_true),
                                    {d}));
  }
  for (auto a : kAttributes) {
    std::vector<double> E(V * d, 0.0), b(V, kOffTask);
    for (auto& [tok, c] : centroid[a]) {
      double n2 = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const double e = c[i] / count[a][tok];
        E[tok * d + i] = beta * e;
        n2 += e * e;
      }
      b[tok] = -0.5 * beta * n2;
    }
    NoGradGuard no_grad;
    // logits = E z + b = (E R_true) h + b
    readout_[a] = ops::matmul(Tensor({V, d}, std::move(E)), task.r_true);
    bias_[a] = Tensor::vector(std::move(b));
  }
}

Tensor PlantedBackend::hidden(TokenId city, Attribute) const { return h_.at(city); }

Tensor PlantedBackend::patched_logits(TokenId, Attribute queried, const Tensor& h_new) const {
  constexpr auto d = PlantedTask::kDim;
  const auto V = task_.world.vocab.size();
  auto col = ops::matmul(readout_.at(queried), ops::reshape(h_new, {d, 1}));
  return ops::add(ops::reshape(col, {V}), bias_.at(queried));
}

Tensor PlantedBackend::clean_logits(TokenId city, Attribute queried) const {
  NoGradGuard no_grad;
  return patched_logits(city, queried, h_.at(city));
}

TokenId PlantedBackend::answer(TokenId city, Attribute queried) const {
  return facts_.at(city).attribute(queried);
}

Selection planted_selection(Attribute target) {
  Selection s(PlantedTask::kDim, false);
  const std::size_t lo = target == Attribute::Country ? 0 : PlantedTask::kCountryDims;
  const std::size_t hi = target == Attribute::Country
                             ? PlantedTask::kCountryDims
                             : PlantedTask::kCountryDims + PlantedTask::kContinentDims;
  for (std::size_t i = lo; i < hi; ++i) s[i] = true;
  return s;
}

double best_neuron_disentangle(const InterventionBackend& backend,
                               const std::vector<InterventionExample>& records, Attribute target) {
  const auto d = backend.d_model();
  if (d > 16) throw std::invalid_argument("brute force limited to 16 neurons");
  const auto space = FeatureSpace::neurons(d);
  double best = 0.0;
  for (std::size_t bits = 0; bits < (std::size_t{1} << d); ++bits) {
    Selection s(d);
    for (std::size_t i = 0; i < d; ++i) s[i] = (bits >> i) & 1U;
    best = std::max(best, evaluate_selection(backend, space, s, records, target).disentangle());
  }
  return best;
}

PlantedDictionary make_planted_dictionary(std::size_t d, std::size_t n_atoms, std::size_t n,
                                          std::size_t sparsity, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> atoms(n_atoms * d);
  for (std::size_t a = 0; a < n_atoms; ++a) {
    double n2 = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      atoms[a * d + i] = rng.normal();
      n2 += atoms[a * d + i] * atoms[a * d + i];
    }
    for (std::size_t i = 0; i < d; ++i) atoms[a * d + i] /= std::sqrt(n2);
  }
  std::vector<double> data(n * d, 0.0);
  std::vector<std::size_t> ids(n_atoms);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t a = 0; a < n_atoms; ++a) ids[a] = a;
    rng.shuffle(ids);
    for (std::size_t j = 0; j < sparsity; ++j) {
      const double w = rng.uniform(0.5, 1.5);
      for (std::size_t i = 0; i < d; ++i) data[r * d + i] += w * atoms[ids[j] * d + i];
    }
  }
  double var = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    double m = 0.0, m2 = 0.0;
    for (std::size_t r = 0; r < n; ++r) m += data[r * d + i];
    m /= static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r) m2 += (data[r * d + i] - m) * (data[r * d + i] - m);
    var += m2 / static_cast<double>(n);
  }
  PlantedDictionary p;
  p.atoms = Tensor({n_atoms, d}, std::move(atoms));
  p.data = Tensor({n, d}, std::move(data));
  p.sparsity = sparsity;
  p.total_variance = var;
  return p;
}

}  // namespace cdlab::testing
