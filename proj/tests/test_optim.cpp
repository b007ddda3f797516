#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cxal/optim.hpp"

using namespace cxal;

namespace {

ParamSet scalar_param(float w, float grad) {
  ParamSet params;
  Tensor& t = params.add("w", Tensor::scalar(w, true), "text");
  t.ensure_grad()[0] = grad;
  return params;
}

AdamWConfig no_decay() {
  AdamWConfig c;
  c.weight_decay = 0.0F;
  return c;
}

}  // namespace

TEST_CASE("first step moves against a positive gradient") {
  ParamSet params = scalar_param(1.0F, 1.0F);
  AdamW opt(no_decay(), {{"text", 0.1F}});
  opt.step(params);
  CHECK(params.get("w").item() < 1.0F);
  CHECK(params.get("w").item() == doctest::Approx(0.9F).epsilon(1e-5));
  CHECK(opt.state().step == 1);
}

TEST_CASE("zero gradient without decay leaves parameters unchanged") {
  ParamSet params = scalar_param(0.7F, 0.0F);
  AdamW opt(no_decay(), {{"text", 0.1F}});
  for (int i = 0; i < 3; ++i) opt.step(params);
  CHECK(params.get("w").item() == 0.7F);
  CHECK(opt.state().step == 3);
}

TEST_CASE("ten steps on w squared shrink |w| monotonically") {
  ParamSet params = scalar_param(1.0F, 0.0F);
  AdamW opt(no_decay(), {{"text", 0.05F}});
  float prev = 1.0F;
  for (int i = 0; i < 10; ++i) {
    Tensor& w = params.get("w");
    w.grad()[0] = 2.0F * w.item();
    opt.step(params);
    CHECK(std::abs(w.item()) < prev);
    prev = std::abs(w.item());
  }
}

TEST_CASE("NaN gradient refuses the step and leaves parameters untouched") {
  ParamSet params = scalar_param(1.0F, 1.0F);
  Tensor& other = params.add("v", Tensor::scalar(2.0F, true), "text");
  other.ensure_grad()[0] = NAN;
  AdamW opt(no_decay(), {{"text", 0.1F}});
  CHECK_THROWS_AS(opt.step(params), NumericError);
  CHECK(params.get("w").item() == 1.0F);
  CHECK(params.get("v").item() == 2.0F);
  CHECK(opt.state().step == 0);
}

TEST_CASE("frozen parameters and their moments are not touched") {
  ParamSet params = scalar_param(1.0F, 1.0F);
  params.add("p", Tensor::scalar(1.0F, true), "projection").ensure_grad()[0] = 1.0F;
  params.set_trainable_prefix("p", false);
  AdamW opt(no_decay(), {{"text", 0.1F}, {"projection", 0.2F}});
  opt.step(params);
  CHECK(params.get("p").item() == 1.0F);
  CHECK(params.get("w").item() < 1.0F);
  CHECK(opt.state().first_moment.contains("w"));
  CHECK_FALSE(opt.state().first_moment.contains("p"));
  CHECK(params.trainable_names() == std::vector<std::string>{"w"});
}

TEST_CASE("group learning rates scale the first step") {
  ParamSet params = scalar_param(1.0F, 1.0F);
  params.add("p", Tensor::scalar(1.0F, true), "projection").ensure_grad()[0] = 1.0F;
  AdamW opt(no_decay(), {{"text", 0.1F}, {"projection", 0.2F}});
  opt.step(params);
  CHECK(params.get("w").item() == doctest::Approx(0.9F).epsilon(1e-5));
  CHECK(params.get("p").item() == doctest::Approx(0.8F).epsilon(1e-5));
}

TEST_CASE("decoupled decay shrinks weights with zero gradient") {
  ParamSet params = scalar_param(1.0F, 0.0F);
  AdamW opt(AdamWConfig{}, {{"text", 0.1F}});
  opt.step(params);
  CHECK(params.get("w").item() == doctest::Approx(1.0F - 0.1F * 0.01F).epsilon(1e-6));
}

TEST_CASE("moments are shape-congruent with parameters") {
  ParamSet params;
  params.add("m", Tensor(3, 4, std::vector<float>(12, 0.5F), true), "text").ensure_grad();
  AdamW opt(no_decay(), {{"text", 0.1F}});
  opt.step(params);
  CHECK(opt.state().first_moment.at("m").size() == 12);
  CHECK(opt.state().second_moment.at("m").size() == 12);
  CHECK(params.scalar_count() == 12);
}

TEST_CASE("duplicate parameter names are rejected") {
  ParamSet params = scalar_param(1.0F, 0.0F);
  CHECK_THROWS(params.add("w", Tensor::scalar(0.0F, true), "text"));
}
