// Learns the step length of a single gradient step on random quadratics and
// compares it with the closed-form optimum.

#include <cstdio>

#include <Eigen/Dense>

#include "proxforge/learn.hpp"

using namespace proxforge;

int main() {
  RngStream rng(3);
  const int n = 5;
  Eigen::MatrixXd R(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) R(i, j) = rng.normal();
  const Eigen::MatrixXd H = R.transpose() * R + Eigen::MatrixXd::Identity(n, n);
  const Eigen::VectorXd x0 = Eigen::VectorXd::Zero(n);
  std::vector<Eigen::VectorXd> bs;
  for (int k = 0; k < 100; ++k) {
    Eigen::VectorXd b(n);
    for (int i = 0; i < n; ++i) b(i) = rng.normal();
    bs.push_back(b);
  }
  TrainConfig cfg;
  cfg.t_max = 3000;
  cfg.eta0 = 1e-2;
  const double learned = train_gd_step(H, x0, bs, 0.01, cfg);
  std::printf("closed form %.8f  learned %.8f\n", closed_form_gd_step(H, x0, bs), learned);
}
