#pragma once

#include <Eigen/Dense>
#include <random>
#include <vector>

namespace coseg::oracle {

// Explicit discrete joint p(y1, y2) on an n1 x n2 label space.
struct JointTable {
  Eigen::MatrixXd probs;  // n1 x n2, nonnegative, sums to 1

  int n1() const { return static_cast<int>(probs.rows()); }
  int n2() const { return static_cast<int>(probs.cols()); }
  bool valid(double tol = 1e-12) const;
};

enum class Direction { Y1First, Y2First };

// One of the two orderings of the joint: marginal over y_i times the
// conditional of y_j given y_i. Zero-mass conditional rows are uniform.
struct Factorization {
  Eigen::VectorXd marginal;     // length n
  Eigen::MatrixXd conditional;  // n x m, rows sum to 1
  Direction direction = Direction::Y1First;
};

JointTable make_random_joint(int n1, int n2, unsigned seed);
Factorization factorize(const JointTable& joint, Direction dir);
JointTable joint_from_factors(const Factorization& f);

// I(y1; y2) in nats; 0*log(0) treated as 0.
double mutual_information(const JointTable& joint);
double mi_sample_estimate(const JointTable& joint, long n_samples, unsigned seed);

// Logistic two-parameter-block model: p(y1|x) = softmax(W1 x),
// p(y2|y1, x) = softmax(W2 [x; onehot(y1)]).
struct ToyModel {
  Eigen::MatrixXd w1;  // n1 x d
  Eigen::MatrixXd w2;  // n2 x (d + n1)
  int d = 0, n1 = 0, n2 = 0;

  static ToyModel random(int d, int n1, int n2, unsigned seed, double scale = 0.1);
  Eigen::VectorXd p_y1(const Eigen::VectorXd& x) const;
  Eigen::VectorXd p_y2_given(const Eigen::VectorXd& x, int y1) const;
};

struct ToySample {
  Eigen::VectorXd x;
  int y1 = 0, y2 = 0;
};

// Mean negative log-likelihood of the factorized joint over a batch. When
// ignore_y1_coupling is set, the onehot(y1) features feeding y2 are zeroed,
// which reduces the second factor to p(y2|x).
double joint_nll(const ToyModel& m, const std::vector<ToySample>& batch,
                 bool ignore_y1_coupling = false);

// Analytic gradients of joint_nll with respect to (w1, w2).
void joint_nll_grad(const ToyModel& m, const std::vector<ToySample>& batch,
                    Eigen::MatrixXd& g1, Eigen::MatrixXd& g2,
                    bool ignore_y1_coupling = false);

// One coupled gradient-descent step on both parameter blocks.
ToyModel coupled_gradient_step(const ToyModel& m, const std::vector<ToySample>& batch,
                               double eta, bool ignore_y1_coupling = false);

// Data generated from a ground-truth coupled model.
std::vector<ToySample> make_coupled_batch(const ToyModel& truth, int n, unsigned seed);

}  // namespace coseg::oracle
