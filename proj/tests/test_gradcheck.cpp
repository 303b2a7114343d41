#include <catch2/catch_amalgamated.hpp>

#include "gradcheck_suite.hpp"

TEST_CASE("finite-difference checks pass for the whole op surface") {
  for (const auto& chk : gradsuite::run_all()) {
    INFO(chk.name << ": max rel err " << chk.max_rel_err << " over "
                  << chk.cases << " cases " << chk.detail);
    CHECK(chk.pass);
    CHECK(chk.cases >= 1);
  }
}

TEST_CASE("grad_check flags non-deterministic functions as invalid") {
  int calls = 0;
  auto fn = [&calls](const gradsuite::Inputs& in) {
    ++calls;
    return msvp::scale(msvp::sum(in[0]), 1.0 + 1e-9 * calls);
  };
  auto res = msvp::grad_check(fn, {msvp::Tensor<double>::full({2}, 1.0)}, 1e-4);
  REQUIRE_FALSE(res.deterministic);
  REQUIRE_FALSE(res.pass);
}

TEST_CASE("grad_check on a constant function passes with zero error") {
  auto fn = [](const gradsuite::Inputs& in) {
    return msvp::scale(msvp::sum(in[0]), 0.0);
  };
  auto res = msvp::grad_check(fn, {msvp::Tensor<double>::full({4}, 2.0)}, 1e-4);
  REQUIRE(res.deterministic);
  REQUIRE(res.pass);
  REQUIRE(res.max_rel_err == 0.0);
}
