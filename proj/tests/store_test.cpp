#include <doctest.h>

#include <fstream>
#include <iterator>

#include "mltd/error.hpp"
#include "mltd/metaloop.hpp"
#include "mltd/store.hpp"
#include "support.hpp"

using namespace mltd;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void spit(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f << bytes;
}

MetaState trained_state(std::uint64_t seed, const TaskSuite& suite) {
  OverlayConfig ov;
  ov.tarp.kind = DecompKind::kDynamic;
  ov.tarp.rank = 2;
  ov.tams_enabled = true;
  ov.tams.reduced_dim = 2;
  ov.tams.n_intermediate = 1;
  ov.tams.controller_hidden = 4;
  MetaState st = init_meta_state(testing::tiny_model(8, 8, 1), ov, seed);
  MetaConfig cfg;
  cfg.meta_batch = 2;
  cfg.inner_steps = 1;
  cfg.inner_lr = 0.1;
  cfg.outer_lr = 1e-2;
  cfg.adapt_set = AdaptSet::kTarpPlusTams;
  RandomTaskSampler sampler(suite.meta_train);
  meta_train(sampler, st, cfg, 1);
  return st;
}

void check_same_state(const MetaState& a, const MetaState& b) {
  REQUIRE(a.params.size() == b.params.size());
  for (const auto& [k, t] : a.params) CHECK(t.equal(b.params.at(k)));
  REQUIRE(a.adam.m.size() == b.adam.m.size());
  for (const auto& [k, t] : a.adam.m) CHECK(t.equal(b.adam.m.at(k)));
  for (const auto& [k, t] : a.adam.v) CHECK(t.equal(b.adam.v.at(k)));
  CHECK(a.adam.step == b.adam.step);
  CHECK(a.adam.lr == b.adam.lr);
  CHECK(a.meta_iter == b.meta_iter);
  CHECK(a.seed == b.seed);
  CHECK(rng_state(a.rng) == rng_state(b.rng));
  CHECK(encode_state_config(a) == encode_state_config(b));
}

}  // namespace

TEST_SUITE("store") {

TEST_CASE("save, load, save is a byte-level fixpoint") {
  testing::TempDir dir("ckpt");
  const auto suite = generate_suite(testing::tiny_suite(1));
  const MetaState st = trained_state(1, suite);
  save_checkpoint(st, dir.path() / "a.ckpt");
  const MetaState back = load_checkpoint(dir.path() / "a.ckpt");
  check_same_state(st, back);
  save_checkpoint(back, dir.path() / "b.ckpt");
  CHECK(slurp(dir.path() / "a.ckpt") == slurp(dir.path() / "b.ckpt"));
}

TEST_CASE("directory holds parameters and both Adam moments") {
  const auto suite = generate_suite(testing::tiny_suite(2));
  const MetaState st = trained_state(2, suite);
  const CheckpointData data = decode_checkpoint(encode_checkpoint(state_to_checkpoint(st)));
  CHECK(data.tensors.size() == st.params.size() + st.adam.m.size() + st.adam.v.size());
  CHECK(st.adam.m.size() == st.params.size());
  CHECK(data.tensors.count("param/tok_emb") == 1);
  CHECK(data.tensors.count("adam.m/tok_emb") == 1);
}

TEST_CASE("generic container round-trips arbitrary tensors and config text") {
  CheckpointData d;
  d.config_json = R"({"note":"x"})";
  Rng rng(3);
  d.tensors.emplace("a", randn({2, 3, 4}, 1.0, rng));
  d.tensors.emplace("scalar", Tensor::full({}, 2.5));
  d.tensors.emplace("f32", randn({5}, 1.0, rng).to(DType::kFloat32));
  const std::string bytes = encode_checkpoint(d);
  const CheckpointData back = decode_checkpoint(bytes);
  CHECK(back.config_json == d.config_json);
  REQUIRE(back.tensors.size() == 3);
  for (const auto& [k, t] : d.tensors) {
    CHECK(back.tensors.at(k).equal(t));
    CHECK(back.tensors.at(k).dtype() == t.dtype());
  }
  CHECK(encode_checkpoint(back) == bytes);
}

TEST_CASE("a flipped payload byte fails the CRC") {
  const auto suite = generate_suite(testing::tiny_suite(3));
  std::string bytes = encode_checkpoint(state_to_checkpoint(trained_state(3, suite)));
  bytes[bytes.size() - 20] ^= 0x10;
  try {
    decode_checkpoint(bytes);
    FAIL("corrupt checkpoint accepted");
  } catch (const FormatError& e) {
    CHECK(e.section() == "crc");
  }
}

TEST_CASE("unknown magic and newer versions are rejected") {
  const auto suite = generate_suite(testing::tiny_suite(4));
  const std::string good = encode_checkpoint(state_to_checkpoint(trained_state(4, suite)));
  std::string bad = good;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
  bad = good;
  bad[8] = static_cast<char>(kCheckpointVersion + 1);
  CHECK_THROWS_AS(decode_checkpoint(bad), UnsupportedVersionError);
}

TEST_CASE("truncated files name the section they end in") {
  const auto suite = generate_suite(testing::tiny_suite(5));
  const std::string good = encode_checkpoint(state_to_checkpoint(trained_state(5, suite)));
  auto section_of = [&](std::size_t keep) -> std::string {
    try {
      decode_checkpoint(std::string_view(good).substr(0, keep));
    } catch (const FormatError& e) {
      return e.section();
    }
    return "accepted";
  };
  CHECK(section_of(10) == "header");
  CHECK(section_of(good.size() - 1) == "payload");
  CHECK(section_of(40) == "config");
}

TEST_CASE("files on disk: missing path is an I/O error, writes replace atomically") {
  testing::TempDir dir("ckptio");
  CHECK_THROWS_AS(load_checkpoint(dir.path() / "missing.ckpt"), IoError);
  const auto suite = generate_suite(testing::tiny_suite(6));
  const MetaState st = trained_state(6, suite);
  spit(dir.path() / "c.ckpt", "stale");
  save_checkpoint(st, dir.path() / "c.ckpt");
  check_same_state(st, load_checkpoint(dir.path() / "c.ckpt"));
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir.path())) ++files;
  CHECK(files == 1);
}

TEST_CASE("compact mode stores float32 parameters") {
  const auto suite = generate_suite(testing::tiny_suite(7));
  const MetaState st = trained_state(7, suite);
  const std::string full = encode_checkpoint(state_to_checkpoint(st));
  const std::string compact = encode_checkpoint(state_to_checkpoint(st, true));
  CHECK(compact.size() < full.size());
  const MetaState back = checkpoint_to_state(decode_checkpoint(compact));
  for (const auto& [k, t] : st.params) {
    const Tensor& b = back.params.at(k);
    CHECK(b.dtype() == DType::kFloat64);
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(b[i] == static_cast<double>(static_cast<float>(t[i])));
  }
}

TEST_CASE("resuming from a checkpoint reproduces uninterrupted training") {
  testing::TempDir dir("resume");
  const auto suite = generate_suite(testing::tiny_suite(8));
  OverlayConfig ov;
  ov.tarp.kind = DecompKind::kBilinear;
  ov.tarp.rank = 2;
  MetaConfig cfg;
  cfg.meta_batch = 2;
  cfg.inner_steps = 1;
  cfg.inner_lr = 0.1;
  cfg.outer_lr = 1e-2;

  MetaState straight = init_meta_state(testing::tiny_model(8, 8, 1), ov, 8);
  RandomTaskSampler s1(suite.meta_train);
  meta_train(s1, straight, cfg, 3);

  MetaState first = init_meta_state(testing::tiny_model(8, 8, 1), ov, 8);
  RandomTaskSampler s2(suite.meta_train);
  meta_train(s2, first, cfg, 1);
  save_checkpoint(first, dir.path() / "mid.ckpt");
  MetaState resumed = load_checkpoint(dir.path() / "mid.ckpt");
  RandomTaskSampler s3(suite.meta_train);
  meta_train(s3, resumed, cfg, 2);

  check_same_state(straight, resumed);
}

}  // TEST_SUITE
