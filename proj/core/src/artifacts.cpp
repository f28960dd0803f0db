#include "idd/artifacts.hpp"

namespace idd {

namespace {

void expect_kind(const Checkpoint& c, const std::string& kind, const std::filesystem::path& path) {
  if (c.header.value("kind", std::string()) != kind) {
    throw FormatError(path.string() + ": expected a " + kind + " checkpoint, found '" +
                      c.header.value("kind", std::string("?")) + "'");
  }
}

}  // namespace

void save_model(const std::filesystem::path& path, const models::Model<float>& model, const nlohmann::json& extra) {
  Checkpoint c;
  c.header = extra;
  c.header["kind"] = "model";
  c.header["spec"] = model.spec();
  c.header["init_seed"] = model.init_seed();
  c.blocks["params"] = model.flat_params();
  save_checkpoint(path, c);
}

models::Model<float> load_model(const std::filesystem::path& path, int expected_classes) {
  const Checkpoint c = load_checkpoint(path);
  expect_kind(c, "model", path);
  const auto spec = c.header.at("spec").get<models::ModelSpec>();
  if (expected_classes >= 0 && spec.num_classes != expected_classes) {
    throw FormatError(path.string() + ": checkpoint has " + std::to_string(spec.num_classes) +
                      " classes but the dataset has " + std::to_string(expected_classes));
  }
  models::Model<float> m(spec, c.header.at("init_seed").get<std::uint64_t>());
  m.set_flat_params(c.block("params"));
  return m;
}

void save_position_head(const std::filesystem::path& path, const position::PositionHead<float>& head,
                        const nlohmann::json& extra) {
  Checkpoint c;
  c.header = extra;
  c.header["kind"] = "position_head";
  c.header["in_channels"] = head.in_channels();
  c.header["hidden"] = head.hidden();
  c.header["seed"] = head.seed();
  c.blocks["params"] = head.flat_params();
  save_checkpoint(path, c);
}

position::PositionHead<float> load_position_head(const std::filesystem::path& path) {
  const Checkpoint c = load_checkpoint(path);
  expect_kind(c, "position_head", path);
  position::PositionHead<float> h(c.header.at("in_channels").get<int>(), c.header.at("hidden").get<int>(),
                                  c.header.at("seed").get<std::uint64_t>());
  h.set_flat_params(c.block("params"));
  return h;
}

}  // namespace idd
