#include "coseg/oracle.hpp"

#include <cmath>
#include <stdexcept>

namespace coseg::oracle {

namespace {

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  Eigen::VectorXd p = (logits.array() - logits.maxCoeff()).exp();
  return p / p.sum();
}

int sample_categorical(const Eigen::VectorXd& p, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double r = u(rng);
  double acc = 0.0;
  for (int i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (r < acc) return i;
  }
  return static_cast<int>(p.size()) - 1;
}

}  // namespace

bool JointTable::valid(double tol) const {
  if (probs.rows() < 1 || probs.cols() < 1) return false;
  if ((probs.array() < 0).any()) return false;
  return std::abs(probs.sum() - 1.0) <= tol;
}

JointTable make_random_joint(int n1, int n2, unsigned seed) {
  if (n1 < 1 || n2 < 1) throw std::invalid_argument("make_random_joint: cardinalities must be >= 1");
  std::mt19937_64 rng(seed);
  std::exponential_distribution<double> ex(1.0);
  JointTable j;
  j.probs.resize(n1, n2);
  for (int a = 0; a < n1; ++a)
    for (int b = 0; b < n2; ++b) j.probs(a, b) = ex(rng);
  j.probs /= j.probs.sum();
  return j;
}

Factorization factorize(const JointTable& joint, Direction dir) {
  const Eigen::MatrixXd m =
      dir == Direction::Y1First ? joint.probs : Eigen::MatrixXd(joint.probs.transpose());
  Factorization f;
  f.direction = dir;
  f.marginal = m.rowwise().sum();
  f.conditional.resize(m.rows(), m.cols());
  for (int r = 0; r < m.rows(); ++r) {
    if (f.marginal[r] > 0)
      f.conditional.row(r) = m.row(r) / f.marginal[r];
    else
      f.conditional.row(r).setConstant(1.0 / m.cols());
  }
  return f;
}

JointTable joint_from_factors(const Factorization& f) {
  Eigen::MatrixXd m = f.marginal.asDiagonal() * f.conditional;
  JointTable j;
  j.probs = f.direction == Direction::Y1First ? m : Eigen::MatrixXd(m.transpose());
  return j;
}

double mutual_information(const JointTable& joint) {
  const Eigen::VectorXd p1 = joint.probs.rowwise().sum();
  const Eigen::RowVectorXd p2 = joint.probs.colwise().sum();
  double mi = 0.0;
  for (int a = 0; a < joint.n1(); ++a) {
    for (int b = 0; b < joint.n2(); ++b) {
      double p = joint.probs(a, b);
      if (p > 0) mi += p * std::log(p / (p1[a] * p2[b]));
    }
  }
  return mi;
}

double mi_sample_estimate(const JointTable& joint, long n_samples, unsigned seed) {
  if (n_samples < 1) throw std::invalid_argument("mi_sample_estimate: n_samples must be >= 1");
  const Eigen::VectorXd p1 = joint.probs.rowwise().sum();
  const Eigen::RowVectorXd p2 = joint.probs.colwise().sum();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int n1 = joint.n1(), n2 = joint.n2();
  double acc = 0.0;
  for (long s = 0; s < n_samples; ++s) {
    double r = u(rng), c = 0.0;
    int a = n1 - 1, b = n2 - 1;
    bool done = false;
    for (int i = 0; i < n1 && !done; ++i)
      for (int j = 0; j < n2 && !done; ++j) {
        c += joint.probs(i, j);
        if (r < c) { a = i; b = j; done = true; }
      }
    acc += std::log(joint.probs(a, b) / (p1[a] * p2[b]));
  }
  return acc / static_cast<double>(n_samples);
}

ToyModel ToyModel::random(int d, int n1, int n2, unsigned seed, double scale) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  ToyModel m;
  m.d = d; m.n1 = n1; m.n2 = n2;
  m.w1.resize(n1, d);
  m.w2.resize(n2, d + n1);
  for (int i = 0; i < m.w1.size(); ++i) m.w1.data()[i] = nd(rng) * scale;
  for (int i = 0; i < m.w2.size(); ++i) m.w2.data()[i] = nd(rng) * scale;
  return m;
}

Eigen::VectorXd ToyModel::p_y1(const Eigen::VectorXd& x) const { return softmax(w1 * x); }

Eigen::VectorXd ToyModel::p_y2_given(const Eigen::VectorXd& x, int y1) const {
  Eigen::VectorXd feat = Eigen::VectorXd::Zero(d + n1);
  feat.head(d) = x;
  feat[d + y1] = 1.0;
  return softmax(w2 * feat);
}

namespace {

Eigen::VectorXd y2_features(const ToyModel& m, const ToySample& s, bool ignore) {
  Eigen::VectorXd feat = Eigen::VectorXd::Zero(m.d + m.n1);
  feat.head(m.d) = s.x;
  if (!ignore) feat[m.d + s.y1] = 1.0;
  return feat;
}

}  // namespace

double joint_nll(const ToyModel& m, const std::vector<ToySample>& batch, bool ignore) {
  if (batch.empty()) throw std::invalid_argument("joint_nll: empty batch");
  double nll = 0.0;
  for (const auto& s : batch) {
    Eigen::VectorXd p1 = softmax(m.w1 * s.x);
    Eigen::VectorXd p2 = softmax(m.w2 * y2_features(m, s, ignore));
    nll -= std::log(p1[s.y1]) + std::log(p2[s.y2]);
  }
  return nll / static_cast<double>(batch.size());
}

void joint_nll_grad(const ToyModel& m, const std::vector<ToySample>& batch, Eigen::MatrixXd& g1,
                    Eigen::MatrixXd& g2, bool ignore) {
  if (batch.empty()) throw std::invalid_argument("joint_nll_grad: empty batch");
  g1 = Eigen::MatrixXd::Zero(m.n1, m.d);
  g2 = Eigen::MatrixXd::Zero(m.n2, m.d + m.n1);
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (const auto& s : batch) {
    Eigen::VectorXd p1 = softmax(m.w1 * s.x);
    p1[s.y1] -= 1.0;
    g1 += inv * p1 * s.x.transpose();
    Eigen::VectorXd feat = y2_features(m, s, ignore);
    Eigen::VectorXd p2 = softmax(m.w2 * feat);
    p2[s.y2] -= 1.0;
    g2 += inv * p2 * feat.transpose();
  }
}

ToyModel coupled_gradient_step(const ToyModel& m, const std::vector<ToySample>& batch, double eta,
                               bool ignore) {
  if (eta < 0) throw std::invalid_argument("coupled_gradient_step: negative learning rate");
  Eigen::MatrixXd g1, g2;
  joint_nll_grad(m, batch, g1, g2, ignore);
  ToyModel out = m;
  out.w1 -= eta * g1;
  out.w2 -= eta * g2;
  return out;
}

std::vector<ToySample> make_coupled_batch(const ToyModel& truth, int n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<ToySample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    ToySample s;
    s.x.resize(truth.d);
    for (int k = 0; k < truth.d; ++k) s.x[k] = nd(rng);
    s.y1 = sample_categorical(truth.p_y1(s.x), rng);
    s.y2 = sample_categorical(truth.p_y2_given(s.x, s.y1), rng);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace coseg::oracle
