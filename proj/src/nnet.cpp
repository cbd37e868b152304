#include "driveweave/nnet.hpp"

#include <filesystem>

#include "driveweave/io.hpp"
#include "json.hpp"

namespace driveweave {

namespace {

template <typename To, typename From>
ModelParams<To> convert(const ModelParams<From>& p) {
  ModelParams<To> out;
  out.cfg = p.cfg;
  for (size_t i = 0; i < p.arrays.size(); ++i)
    out.add(p.names[i], p.arrays[i].template cast<To>());
  return out;
}

nlohmann::json config_json(const ModelConfig& c) {
  return {{"vocab", c.vocab},         {"d", c.d},
          {"layers", c.layers},       {"heads", c.heads},
          {"dff", c.dff},             {"max_len", c.max_len},
          {"ego_dim", c.ego_dim},     {"act_hidden", c.act_hidden},
          {"depth_range", c.depth_range}, {"seed", c.seed}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab = j.at("vocab").get<int>();
  c.d = j.at("d").get<int>();
  c.layers = j.at("layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.dff = j.at("dff").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.ego_dim = j.at("ego_dim").get<int>();
  c.act_hidden = j.at("act_hidden").get<int>();
  c.depth_range = j.at("depth_range").get<double>();
  c.seed = j.at("seed").get<uint64_t>();
  return c;
}

}  // namespace

ModelParams<double> to_double(const ModelParams<float>& p) {
  return convert<double>(p);
}

ModelParams<float> to_float(const ModelParams<double>& p) {
  return convert<float>(p);
}

void save_checkpoint(const ModelParams<float>& p, int64_t step,
                     const std::string& json_path, const std::string& blob_path) {
  BlobWriter blob;
  nlohmann::json arrays = nlohmann::json::array();
  for (size_t i = 0; i < p.arrays.size(); ++i) {
    const MatX<float>& m = p.arrays[i];
    nlohmann::json a;
    a["name"] = p.names[i];
    a["rows"] = static_cast<int>(m.rows());
    a["cols"] = static_cast<int>(m.cols());
    a["offset"] = blob.size();
    std::vector<float> flat(static_cast<size_t>(m.size()));
    for (int r = 0; r < m.rows(); ++r)
      for (int c = 0; c < m.cols(); ++c)
        flat[static_cast<size_t>(r) * static_cast<size_t>(m.cols()) +
             static_cast<size_t>(c)] = m(r, c);
    blob.put_f32(flat);
    arrays.push_back(std::move(a));
  }
  nlohmann::json j;
  j["format"] = "driveweave-checkpoint-v1";
  j["step"] = step;
  j["config"] = config_json(p.cfg);
  j["blob_file"] = std::filesystem::path(blob_path).filename().string();
  j["arrays"] = std::move(arrays);
  blob.save(blob_path);
  write_text_file(json_path, j.dump(1) + "\n");
}

Checkpoint load_checkpoint(const std::string& json_path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(json_path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint manifest " + json_path + " is not valid JSON: " + e.what());
  }
  if (j.value("format", "") != "driveweave-checkpoint-v1")
    throw DataError("unrecognized checkpoint format in " + json_path);

  Checkpoint out;
  out.step = j.at("step").get<int64_t>();
  ModelConfig cfg = config_from_json(j.at("config"));
  ModelParams<float> expect = init_params<float>(cfg);

  std::filesystem::path blob_file =
      std::filesystem::path(json_path).parent_path() / j.at("blob_file").get<std::string>();
  BlobReader blob(blob_file.string());

  out.params.cfg = cfg;
  const auto& arrays = j.at("arrays");
  if (arrays.size() != expect.arrays.size())
    throw DataError("checkpoint lists " + std::to_string(arrays.size()) + " arrays, expected " +
                    std::to_string(expect.arrays.size()));
  for (size_t i = 0; i < arrays.size(); ++i) {
    const auto& a = arrays[i];
    std::string name = a.at("name").get<std::string>();
    int rows = a.at("rows").get<int>();
    int cols = a.at("cols").get<int>();
    size_t offset = a.at("offset").get<size_t>();
    if (name != expect.names[i])
      throw DataError("checkpoint array " + std::to_string(i) + " is '" + name +
                      "', expected '" + expect.names[i] + "'");
    const MatX<float>& ref = expect.arrays[i];
    if (rows != ref.rows() || cols != ref.cols())
      throw DataError("checkpoint array '" + name + "' has shape " + std::to_string(rows) +
                      "x" + std::to_string(cols) + ", expected " +
                      std::to_string(ref.rows()) + "x" + std::to_string(ref.cols()));
    std::vector<float> vals = blob.get_f32(offset, static_cast<size_t>(rows) * cols);
    MatX<float> m(rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        float v = vals[static_cast<size_t>(r) * cols + c];
        if (!std::isfinite(v))
          throw DataError("checkpoint array '" + name + "' holds a non-finite value");
        m(r, c) = v;
      }
    out.params.add(name, std::move(m));
  }
  return out;
}

}  // namespace driveweave
