#include "snaplab/evaldata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "snaplab/error.hpp"

namespace snaplab {

ConditionalDataset::ConditionalDataset(std::vector<GaussianMixture> per_class, std::uint64_t seed)
    : per_class_(std::move(per_class)), seed_(seed) {
  if (per_class_.empty()) throw DomainError("dataset needs at least one class");
  for (const auto& m : per_class_)
    if (m.dim() != per_class_.front().dim()) throw ShapeError("dataset classes differ in dimension");
}

ConditionalDataset ConditionalDataset::toy_2d(std::uint64_t seed) {
  constexpr int kClasses = 8;
  constexpr double kInner = 1.0, kOuter = 1.8, kStd = 0.12;
  std::vector<GaussianMixture> classes;
  for (int k = 0; k < kClasses; ++k) {
    const double angle = 2.0 * std::numbers::pi * k / kClasses;
    Tensor means(2, 2);
    means << kInner * std::cos(angle), kInner * std::sin(angle), kOuter * std::cos(angle), kOuter * std::sin(angle);
    classes.emplace_back(std::vector<double>{0.5, 0.5}, means, Tensor::Constant(2, 2, kStd * kStd));
  }
  return ConditionalDataset(std::move(classes), seed);
}

Batch ConditionalDataset::draw(Eigen::Index n, Rng& rng) const {
  Batch b{Tensor(n, dim()), std::vector<int>(static_cast<std::size_t>(n))};
  for (Eigen::Index i = 0; i < n; ++i) {
    const int label = rng.uniform_int(0, num_classes() - 1);
    b.labels[static_cast<std::size_t>(i)] = label;
    b.x.row(i) = per_class_[static_cast<std::size_t>(label)].sample(1, rng);
  }
  return b;
}

std::vector<int> balanced_labels(Eigen::Index n, int num_classes) {
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = static_cast<int>(i % num_classes);
  return labels;
}

Batch ConditionalDataset::draw_balanced(Eigen::Index n, std::uint64_t seed) const {
  Batch b{Tensor(n, dim()), balanced_labels(n, num_classes())};
  Rng rng(derive_seed(seed_, seed));
  for (Eigen::Index i = 0; i < n; ++i) b.x.row(i) = per_class_[static_cast<std::size_t>(b.labels[i])].sample(1, rng);
  return b;
}

Eigen::RowVectorXd ConditionalDataset::sample(int label, std::uint64_t index) const {
  if (label < 0 || label >= num_classes()) throw DomainError("dataset label out of range");
  Rng rng(derive_seed(derive_seed(seed_, static_cast<std::uint64_t>(label)), index));
  return per_class_[static_cast<std::size_t>(label)].sample(1, rng).row(0);
}

MixtureOracle ConditionalDataset::oracle(const NoiseSchedule& schedule, PredictionKind output) const {
  return MixtureOracle(per_class_, schedule, output);
}

double wasserstein_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw DomainError("wasserstein_1d: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  // Integrate |F_a - F_b| over the merged breakpoints.
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double prev = std::min(a.front(), b.front());
  double total = 0.0;
  while (i < a.size() || j < b.size()) {
    double next;
    if (j >= b.size() || (i < a.size() && a[i] <= b[j]))
      next = a[i];
    else
      next = b[j];
    total += std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb) * (next - prev);
    prev = next;
    while (i < a.size() && a[i] == next) ++i;
    while (j < b.size() && b[j] == next) ++j;
  }
  return total;
}

double distribution_distance(const Tensor& samples, const Tensor& reference, const SlicedWassersteinOptions& options) {
  if (samples.cols() != reference.cols()) throw ShapeError("distribution_distance: dimension mismatch");
  if (samples.rows() < options.min_samples || reference.rows() < options.min_samples)
    throw DomainError("distribution_distance: need at least " + std::to_string(options.min_samples) +
                      " samples in each set");
  if (options.projections <= 0) throw DomainError("distribution_distance: projections must be > 0");
  Rng rng(options.seed);
  Tensor dirs = rng.normal(options.projections, samples.cols());
  for (Eigen::Index p = 0; p < dirs.rows(); ++p) dirs.row(p).normalize();
  const Tensor pa = samples * dirs.transpose();
  const Tensor pb = reference * dirs.transpose();
  double total = 0.0;
  for (Eigen::Index p = 0; p < dirs.rows(); ++p) {
    std::vector<double> a(static_cast<std::size_t>(pa.rows())), b(static_cast<std::size_t>(pb.rows()));
    for (Eigen::Index i = 0; i < pa.rows(); ++i) a[static_cast<std::size_t>(i)] = pa(i, p);
    for (Eigen::Index i = 0; i < pb.rows(); ++i) b[static_cast<std::size_t>(i)] = pb(i, p);
    total += wasserstein_1d(std::move(a), std::move(b));
  }
  return total / static_cast<double>(dirs.rows());
}

double data_scale(const Tensor& reference) {
  const Eigen::RowVectorXd mu = reference.colwise().mean();
  const double var = (reference.rowwise() - mu).squaredNorm() / static_cast<double>(reference.size());
  return std::sqrt(var);
}

ad::Var ConsistencyProbe::logits(const Tensor& x) const {
  using namespace ad;
  Var h = silu(add_row(matmul(Var::constant(x), w1_.var()), b1_.var()));
  h = silu(add_row(matmul(h, w2_.var()), b2_.var()));
  return add_row(matmul(h, w3_.var()), b3_.var());
}

ConsistencyProbe ConsistencyProbe::train(const DataSource& data, const ProbeOptions& options) {
  Rng rng(options.seed);
  const auto d = data.dim();
  const int h = options.hidden, k = data.num_classes();
  ConsistencyProbe p;
  p.w1_ = Param(rng.normal(d, h) / std::sqrt(static_cast<double>(d)));
  p.b1_ = Param(Tensor::Zero(1, h));
  p.w2_ = Param(rng.normal(h, h) / std::sqrt(static_cast<double>(h)));
  p.b2_ = Param(Tensor::Zero(1, h));
  p.w3_ = Param(rng.normal(h, k) / std::sqrt(static_cast<double>(h)));
  p.b3_ = Param(Tensor::Zero(1, k));
  AdamW opt({&p.w1_, &p.b1_, &p.w2_, &p.b2_, &p.w3_, &p.b3_}, {options.learning_rate, 0.9, 0.999, 1e-8, 0.0});
  for (int step = 0; step < options.steps; ++step) {
    const Batch b = data.draw(options.batch_size, rng);
    opt.zero_grad();
    ad::backward(ad::softmax_cross_entropy(p.logits(b.x), b.labels));
    opt.step();
  }
  return p;
}

Tensor ConsistencyProbe::probabilities(const Tensor& x) const {
  ad::NoGradGuard guard;
  return ad::softmax_rows(logits(x).value());
}

std::uint64_t ConsistencyProbe::checksum() const {
  const Tensor* ts[] = {&w1_.value(), &b1_.value(), &w2_.value(), &b2_.value(), &w3_.value(), &b3_.value()};
  return snaplab::checksum(ts);
}

double condition_consistency(const Tensor& samples, std::span<const int> labels, const ConsistencyProbe& probe,
                             std::uint64_t expected_checksum) {
  if (probe.checksum() != expected_checksum) throw Error("condition_consistency: probe checksum mismatch");
  if (static_cast<Eigen::Index>(labels.size()) != samples.rows())
    throw ShapeError("condition_consistency: one label per sample");
  if (samples.rows() == 0) throw DomainError("condition_consistency: no samples");
  const Tensor p = probe.probabilities(samples);
  double total = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const int l = labels[static_cast<std::size_t>(i)];
    if (l < 0 || l >= p.cols()) throw DomainError("condition_consistency: label out of range");
    total += p(i, l);
  }
  return total / static_cast<double>(p.rows());
}

std::vector<TradeoffPoint> eval_curve(const Denoiser& model, const NoiseSchedule& schedule,
                                      const ConditionalDataset& data, const ConsistencyProbe& probe,
                                      const CurveOptions& options) {
  if (options.w_list.empty()) throw DomainError("eval_curve: w_list is empty");
  const std::vector<int> labels = balanced_labels(options.n_samples, data.num_classes());
  const Tensor reference = data.draw_balanced(options.n_samples, derive_seed(options.seed, 1)).x;
  Rng noise_rng(derive_seed(options.seed, 2));
  const Tensor noise = noise_rng.normal(options.n_samples, model.dim());
  const std::uint64_t probe_sum = probe.checksum();
  std::vector<TradeoffPoint> points;
  points.reserve(options.w_list.size());
  for (double w : options.w_list) {
    const Tensor xs = sample_from_noise(model, schedule, options.steps, noise, labels, GuidanceScale(w));
    points.push_back({w, distribution_distance(xs, reference), condition_consistency(xs, labels, probe, probe_sum)});
  }
  return points;
}

namespace {
std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}
}  // namespace

void write_curve_csv(const std::filesystem::path& path, std::span<const TradeoffPoint> points,
                     const CurveOptions& options, const std::string& config_hash) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << "w,dist,consistency,steps,n_samples,seed,config_hash\n";
  for (const auto& p : points)
    out << fmt(p.w) << ',' << fmt(p.dist) << ',' << fmt(p.consistency) << ',' << options.steps << ','
        << options.n_samples << ',' << options.seed << ',' << config_hash << '\n';
}

void write_curve_svg(const std::filesystem::path& path,
                     std::span<const std::pair<std::string, std::vector<TradeoffPoint>>> curves) {
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& [name, pts] : curves)
    for (const auto& p : pts) {
      xmin = std::min(xmin, p.dist);
      xmax = std::max(xmax, p.dist);
      ymin = std::min(ymin, p.consistency);
      ymax = std::max(ymax, p.consistency);
    }
  if (xmax <= xmin) xmax = xmin + 1.0;
  if (ymax <= ymin) ymax = ymin + 1.0;
  constexpr double W = 640, H = 480, M = 60;
  auto px = [&](double x) { return M + (x - xmin) / (xmax - xmin) * (W - 2 * M); };
  auto py = [&](double y) { return H - M - (y - ymin) / (ymax - ymin) * (H - 2 * M); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<line x1=\"" << M << "\" y1=\"" << H - M << "\" x2=\"" << W - M << "\" y2=\"" << H - M
      << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << M << "\" y1=\"" << M << "\" x2=\"" << M << "\" y2=\"" << H - M << "\" stroke=\"black\"/>\n"
      << "<text x=\"" << W / 2 << "\" y=\"" << H - 15 << "\" text-anchor=\"middle\">dist (" << fmt(xmin) << " .. "
      << fmt(xmax) << ")</text>\n"
      << "<text x=\"15\" y=\"" << H / 2 << "\" transform=\"rotate(-90 15," << H / 2
      << ")\" text-anchor=\"middle\">consistency (" << fmt(ymin) << " .. " << fmt(ymax) << ")</text>\n";
  std::size_t c = 0;
  for (const auto& [name, pts] : curves) {
    const char* color = colors[c % std::size(colors)];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" points=\"";
    for (const auto& p : pts) out << fmt(px(p.dist)) << ',' << fmt(py(p.consistency)) << ' ';
    out << "\"/>\n";
    out << "<text x=\"" << W - M << "\" y=\"" << M + 18.0 * static_cast<double>(c) << "\" fill=\"" << color
        << "\" text-anchor=\"end\">" << name << "</text>\n";
    ++c;
  }
  out << "</svg>\n";
}

std::vector<double> guidance_grid(double lo, double hi, double step) {
  if (!(step > 0.0) || hi < lo) throw DomainError("guidance_grid: need step > 0 and hi >= lo");
  std::vector<double> out;
  for (int i = 0;; ++i) {
    const double w = lo + step * i;
    if (w > hi + 1e-9) break;
    out.push_back(w);
  }
  return out;
}

}  // namespace snaplab
