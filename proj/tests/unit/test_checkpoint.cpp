#include <doctest.h>

#include <filesystem>
#include <random>

#include "check.hpp"
#include "libs/binio.hpp"
#include "libs/checkpoint.hpp"

using namespace libs;

namespace {

Tensor f32_tensor(Shape shape, std::mt19937_64& rng) {
  Tensor t = libs::testing::random_tensor(std::move(shape), rng, -3, 3);
  for (auto& v : t.data()) v = static_cast<float>(v);
  return t;
}

Checkpoint sample(std::mt19937_64& rng) {
  Checkpoint c;
  c.put("enc.w", f32_tensor({3, 4}, rng));
  c.put("b", f32_tensor({5}, rng));
  c.put("scalar", Tensor::vector({0.25}));
  c.meta["kind"] = "recognizer";
  c.meta["epoch"] = "3";
  return c;
}

}  // namespace

TEST_CASE("serialised layout") {
  Checkpoint c;
  c.put("ab", Tensor::matrix(1, 2, {1.0, -2.0}));
  c.meta["k"] = "v";
  BinaryReader r(serialize_checkpoint(c), "mem");
  r.expect_magic("LIBSCKPT");
  CHECK(r.u32() == kCheckpointVersion);
  CHECK(r.u32() == 1);
  CHECK(r.u16() == 2);
  CHECK(r.raw(2) == "ab");
  CHECK(r.u8() == 2);
  CHECK(r.u32() == 1);
  CHECK(r.u32() == 2);
  CHECK(r.f32() == 1.0f);
  CHECK(r.f32() == -2.0f);
  CHECK(parse_key_values(r.block(), "meta") == c.meta);
  CHECK(r.at_end());
}

TEST_CASE("round trip is bit-exact") {
  std::mt19937_64 rng(1);
  Checkpoint c = sample(rng);
  const std::string bytes = serialize_checkpoint(c);
  Checkpoint back = parse_checkpoint(bytes, "mem");
  CHECK(back == c);
  CHECK(serialize_checkpoint(back) == bytes);

  auto path = std::filesystem::temp_directory_path() / "libs_test_ckpt" / "a.ckpt";
  save_checkpoint(c, path);
  CHECK(load_checkpoint(path) == c);
  CHECK(file_digest(path) == digest(bytes));
}

TEST_CASE("store helpers") {
  std::mt19937_64 rng(2);
  ParameterStore s;
  s.add("w", f32_tensor({2, 2}, rng));
  s.add("b", f32_tensor({2}, rng));
  Checkpoint c;
  c.put_store(s, "model/");
  CHECK(c.find("model/w") != nullptr);
  ParameterStore t;
  t.add("w", Tensor(Shape{2, 2}));
  t.add("b", Tensor(Shape{2}));
  c.load_store(t, "model/");
  CHECK(t.at("w").value == s.at("w").value);
  ParameterStore wrong;
  wrong.add("w", Tensor(Shape{3}));
  CHECK_THROWS_AS(c.load_store(wrong, "model/"), FormatError);
  ParameterStore missing;
  missing.add("zz", Tensor(Shape{1}));
  CHECK_THROWS_AS(c.load_store(missing, "model/"), FormatError);
  CHECK_THROWS_AS(c.meta_at("nope"), FormatError);
  c.put("model/w", Tensor::vector({1}));
  CHECK(c.find("model/w")->size() == 1);
}

TEST_CASE("corrupt checkpoints fail with an offset") {
  std::mt19937_64 rng(3);
  const std::string bytes = serialize_checkpoint(sample(rng));
  for (std::size_t cut : {0ul, 5ul, 12ul, 20ul, bytes.size() - 1}) {
    try {
      parse_checkpoint(bytes.substr(0, cut), "mem");
      FAIL("truncated checkpoint parsed");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("offset") != std::string::npos);
    }
  }
  std::string version = bytes;
  version[8] = 9;
  CHECK_THROWS_AS(parse_checkpoint(version, "mem"), FormatError);
  CHECK_THROWS_AS(parse_checkpoint(bytes + "x", "mem"), FormatError);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/x.ckpt"), IoError);
}

TEST_CASE("digest is FNV-1a 64") {
  CHECK(digest("") == "cbf29ce484222325");
  CHECK(digest("a") == "af63dc4c8601ec8c");
}
