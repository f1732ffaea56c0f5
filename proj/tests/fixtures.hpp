#pragma once

// Library-built setups shared by the unit tests and the acceptance run.

#include "nfilab/nc_geometry.hpp"
#include "nfilab/trainer.hpp"

namespace fixture {

// UFM whose sample features sit exactly on the class means of `nc`.
inline nfilab::Model ufm_from_nc(const nfilab::NCState& nc, const nfilab::Dataset& data) {
  nfilab::ModelConfig mc;
  mc.num_classes = nc.K();
  mc.feature_dim = nc.d();
  mc.samples = data.size();
  nfilab::Model m = nfilab::Model::make(mc, 0);
  auto H = m.block(m.features_block());
  for (int i = 0; i < data.size(); ++i) H.row(i) = nc.class_means.row(data.labels[i]);
  m.block(m.classifier_block()) = nc.classifier;
  return m;
}

inline double relative_error(const Eigen::VectorXd& got, const Eigen::VectorXd& want) {
  return (got - want).norm() / want.norm();
}

}  // namespace fixture
