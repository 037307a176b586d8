#include "mad/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <sstream>

namespace mad {

namespace {

using nlohmann::json;

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

json layer_json(const LayerSpec& spec) {
  return std::visit(
      [](const auto& s) -> json {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, ConvSpec>) {
          return {{"kind", "conv"}, {"c_in", s.c_in}, {"c_out", s.c_out}, {"kernel", s.kernel},
                  {"stride", s.stride}, {"padding", s.padding}};
        } else if constexpr (std::is_same_v<T, FcSpec>) {
          return {{"kind", "fc"}, {"n_in", s.n_in}, {"n_out", s.n_out}};
        } else if constexpr (std::is_same_v<T, ReluSpec>) {
          return {{"kind", "relu"}};
        } else {
          return {{"kind", "flatten"}};
        }
      },
      spec);
}

LayerSpec layer_from_json(const json& j) {
  const std::string kind = j.at("kind");
  if (kind == "conv") {
    return ConvSpec{j.at("c_in"), j.at("c_out"), j.at("kernel"), j.at("stride"), j.at("padding")};
  }
  if (kind == "fc") return FcSpec{j.at("n_in"), j.at("n_out")};
  if (kind == "relu") return ReluSpec{};
  if (kind == "flatten") return FlattenSpec{};
  throw CheckpointError("unknown layer kind '" + kind + "'");
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  const Network& net = ckpt.net;
  json header;
  header["format"] = "mad-checkpoint";
  header["version"] = 1;
  header["arch_id"] = to_string(net.arch());
  header["input_shape"] = net.input_shape();
  header["n_classes"] = net.n_classes();
  header["seed"] = net.seed();
  header["stage"] = ckpt.stage;
  json layers = json::array();
  for (const auto& l : net.layers()) layers.push_back(layer_json(l));
  header["layers"] = layers;
  json shapes = json::array();
  for (const auto& p : net.param_layers()) {
    shapes.push_back({{"layer", p.layer_index}, {"weight", p.weight_shape}, {"bias", {p.rows}}});
  }
  header["param_shapes"] = shapes;
  json payload = json::array();
  payload.push_back({{"name", "params"}, {"dtype", "f32le"}, {"count", net.num_params()}});
  header["prune_mask"] = ckpt.prune_keep.has_value();
  if (ckpt.prune_keep) {
    if (ckpt.prune_keep->size() != net.num_weights()) {
      throw CheckpointError("prune mask length does not match weight count");
    }
    payload.push_back({{"name", "prune_mask"}, {"dtype", "u8"}, {"count", net.num_weights()}});
  }
  header["payload"] = payload;
  header["saliency"] = ckpt.saliency_meta;

  const std::string text = header.dump();
  std::string out;
  out.reserve(8 + text.size() + 4 * net.num_params() + net.num_weights());
  put_u64(out, text.size());
  out += text;
  for (Real v : net.params()) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
  }
  if (ckpt.prune_keep) {
    for (auto b : *ckpt.prune_keep) out.push_back(static_cast<char>(b ? 1 : 0));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8) throw CheckpointError("checkpoint truncated: missing header length");
  const std::uint64_t header_len = get_u64(bytes, 0);
  if (header_len > bytes.size() - 8) throw CheckpointError("checkpoint truncated: header");
  json header;
  try {
    header = json::parse(bytes.substr(8, header_len));
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  if (header.value("format", "") != "mad-checkpoint") throw CheckpointError("not a mad checkpoint");

  std::vector<LayerSpec> layers;
  for (const auto& l : header.at("layers")) layers.push_back(layer_from_json(l));
  Network net(parse_arch(header.at("arch_id")), header.at("input_shape").get<Shape>(),
              header.at("n_classes").get<std::size_t>(), header.at("seed").get<std::uint64_t>(),
              std::move(layers));

  std::size_t pos = 8 + header_len;
  const bool has_mask = header.at("prune_mask").get<bool>();
  const std::size_t need = 4 * net.num_params() + (has_mask ? net.num_weights() : 0);
  if (bytes.size() - pos != need) {
    throw CheckpointError("checkpoint payload has " + std::to_string(bytes.size() - pos) +
                          " bytes, expected " + std::to_string(need));
  }
  for (auto& v : net.params()) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= std::uint32_t(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    v = static_cast<Real>(std::bit_cast<float>(bits));
    pos += 4;
  }
  Checkpoint ckpt{std::move(net), std::nullopt, header.value("saliency", json()),
                  header.value("stage", "")};
  if (has_mask) {
    std::vector<std::uint8_t> keep(ckpt.net.num_weights());
    for (auto& b : keep) b = static_cast<std::uint8_t>(bytes[pos++]);
    ckpt.prune_keep = std::move(keep);
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace mad
