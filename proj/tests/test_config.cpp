#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "fsrf/config.hpp"

namespace config = fsrf::config;
namespace data = fsrf::data;
namespace model = fsrf::model;
using nlohmann::json;

namespace {

std::filesystem::path fresh_dir(const char* tag) {
  auto dir = std::filesystem::temp_directory_path() /
             (std::string("fsrf_config_") + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("defaults validate and round-trip through json") {
  config::RunConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.eval.ratios.size() == 10);
  CHECK(c.eval.ratios.front() == 0.1);
  CHECK(c.eval.ratios.back() == 1.0);

  json j = config::config_to_json(c);
  config::RunConfig back = config::config_from_json(j);
  CHECK(config::config_to_json(back) == j);
  CHECK(config::config_hash(back) == config::config_hash(c));

  // Partial documents keep defaults for everything unspecified.
  config::RunConfig partial =
      config::config_from_json(json::parse(R"({"train":{"epochs":3}})"));
  CHECK(partial.train.epochs == 3);
  CHECK(partial.train.batch_size == c.train.batch_size);
  CHECK(partial.model.d_u == c.model.d_u);
  CHECK(config::config_hash(partial) != config::config_hash(c));
}

TEST_CASE("unknown keys and bad values are rejected") {
  CHECK_THROWS_AS(config::config_from_json(json::parse(R"({"trian":{}})")),
                  fsrf::InputError);
  CHECK_THROWS_AS(
      config::config_from_json(json::parse(R"({"train":{"epoch":3}})")),
      fsrf::InputError);
  CHECK_THROWS_AS(
      config::config_from_json(json::parse(R"({"train":{"epochs":"many"}})")),
      fsrf::InputError);
  CHECK_THROWS_AS(
      config::config_from_json(json::parse(R"({"model":{"variant":"fancy"}})")),
      fsrf::InputError);
  CHECK_THROWS_AS(
      config::config_from_json(json::parse(R"({"loss":{"mu":[1,2]}})")),
      fsrf::InputError);
  CHECK_THROWS_AS(config::config_from_json(json::parse(
                      R"({"dataset":{"dims":{"l":{"T":0,"d":4}}}})")),
                  fsrf::InputError);
  CHECK_THROWS_AS(config::config_from_json(json::parse(R"([1,2,3])")),
                  fsrf::InputError);
  // Valid enum strings parse.
  config::RunConfig c = config::config_from_json(
      json::parse(R"({"model":{"variant":"no_das"},
                      "dataset":{"label_kind":"regression"}})"));
  CHECK(c.model.variant == model::Variant::kNoDas);
  CHECK(c.dataset.synth.label_kind == data::LabelKind::kRegression);
}

TEST_CASE("dotted overrides parse typed values") {
  json doc = config::config_to_json(config::RunConfig{});

  config::apply_override(doc, "train.epochs=5");
  config::apply_override(doc, "train.learning_rate=0.01");
  config::apply_override(doc, "model.variant=no_dhf");
  config::apply_override(doc, "train.mrm_resample_each_epoch=false");
  config::apply_override(doc, "train.seeds=[3,4,5]");
  config::apply_override(doc, "dataset.name=probe run");

  config::RunConfig c = config::config_from_json(doc);
  CHECK(c.train.epochs == 5);
  CHECK(c.train.learning_rate == 0.01);
  CHECK(c.model.variant == model::Variant::kNoDhf);
  CHECK(c.train.mrm_resample_each_epoch == false);
  CHECK(c.train.seeds == std::vector<std::uint64_t>{3, 4, 5});
  CHECK(c.dataset.synth.name == "probe run");

  // Overrides may create paths that do not exist yet in a partial doc.
  json partial = json::object();
  config::apply_override(partial, "loss.lambda1=0");
  CHECK(config::config_from_json(partial).train.loss.lambda1 == 0.0);

  CHECK_THROWS_AS(config::apply_override(doc, "no-equals-sign"),
                  fsrf::InputError);
  CHECK_THROWS_AS(config::apply_override(doc, "=5"), fsrf::InputError);
  CHECK_THROWS_AS(config::apply_override(doc, "train..epochs=5"),
                  fsrf::InputError);
  CHECK_THROWS_AS(config::apply_override(doc, "train.epochs.nested=5"),
                  fsrf::InputError);
  // A typo in the key surfaces at validation, not silently.
  json typo = config::config_to_json(config::RunConfig{});
  config::apply_override(typo, "train.epohcs=5");
  CHECK_THROWS_AS(config::config_from_json(typo), fsrf::InputError);
}

TEST_CASE("config files load with clear errors") {
  auto dir = fresh_dir("load");

  std::ofstream good(dir / "good.json");
  good << R"({"train":{"epochs":2},"model":{"d_u":16}})";
  good.close();
  config::RunConfig c = config::load_config((dir / "good.json").string());
  CHECK(c.train.epochs == 2);
  CHECK(c.model.d_u == 16);

  std::ofstream bad(dir / "bad.json");
  bad << "{not json";
  bad.close();
  CHECK_THROWS_AS(config::load_config((dir / "bad.json").string()),
                  fsrf::InputError);
  CHECK_THROWS_AS(config::load_config((dir / "missing.json").string()),
                  fsrf::InputError);
  CHECK_NOTHROW(config::load_config(""));  // empty path means defaults
  std::filesystem::remove_all(dir);
}

TEST_CASE("hash tracks every effective field") {
  config::RunConfig a;
  config::RunConfig b;
  CHECK(config::config_hash(a) == config::config_hash(b));
  b.train.loss.lambda2 = 0.11;
  CHECK(config::config_hash(a) != config::config_hash(b));
  b = a;
  b.dataset.synth.seed = 2;
  CHECK(config::config_hash(a) != config::config_hash(b));
  b = a;
  b.eval.draws = 6;
  CHECK(config::config_hash(a) != config::config_hash(b));
}

TEST_CASE("make_dataset dispatches on source") {
  config::RunConfig c;
  c.dataset.synth.sample_count = 8;
  data::Dataset synth = config::make_dataset(c);
  CHECK(synth.samples.size() == 8);

  auto dir = fresh_dir("dataset");
  std::filesystem::path manifest = data::save_dataset(synth, dir);
  config::RunConfig m;
  m.dataset.source = "manifest";
  m.dataset.manifest = manifest.string();
  data::Dataset loaded = config::make_dataset(m);
  REQUIRE(loaded.samples.size() == synth.samples.size());
  CHECK(loaded.samples[0].features[0].values == synth.samples[0].features[0].values);

  config::RunConfig bad;
  bad.dataset.source = "ftp";
  CHECK_THROWS_AS(config::make_dataset(bad), fsrf::InputError);
  config::RunConfig no_path;
  no_path.dataset.source = "manifest";
  CHECK_THROWS_AS(config::make_dataset(no_path), fsrf::InputError);
  std::filesystem::remove_all(dir);
}
