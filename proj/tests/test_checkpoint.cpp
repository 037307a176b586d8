#include "mad/checkpoint.hpp"

#include <doctest.h>

#include <cstring>
#include <filesystem>

using namespace mad;

TEST_CASE("checkpoint round trip is bit exact after the first save") {
  Network net = make_net(ArchId::convnet4, {1, 16, 16}, 10, 3);
  std::vector<std::uint8_t> keep(net.num_weights(), 1);
  for (std::size_t w = 0; w < keep.size(); w += 3) keep[w] = 0;
  const Checkpoint c{net, keep, {{"method", "mad"}}, "pruned"};
  const std::string first = encode_checkpoint(c);
  const Checkpoint back = decode_checkpoint(first);
  CHECK(encode_checkpoint(back) == first);
  CHECK(back.prune_keep == keep);
  CHECK(back.stage == "pruned");
  CHECK(back.saliency_meta["method"] == "mad");
  CHECK(back.net.arch() == ArchId::convnet4);
  for (std::size_t k = 0; k < net.num_params(); ++k) {
    CHECK(back.net.params()[k] == static_cast<Real>(static_cast<float>(net.params()[k])));
  }
}

TEST_CASE("float-valued networks survive exactly") {
  Network net = make_net(ArchId::mlp2, {1, 4, 4}, 3, 1);
  for (auto& v : net.params()) v = static_cast<float>(v);
  const Checkpoint back = decode_checkpoint(encode_checkpoint({net, std::nullopt, nullptr, "trained"}));
  CHECK(back.net == net);
  CHECK_FALSE(back.prune_keep.has_value());
}

TEST_CASE("header starts with its little-endian length") {
  const Network net = make_net(ArchId::mlp2, {1, 4, 4}, 3, 1);
  const std::string bytes = encode_checkpoint({net, std::nullopt, nullptr, "trained"});
  std::uint64_t len = 0;
  for (int i = 7; i >= 0; --i) len = (len << 8) | static_cast<unsigned char>(bytes[i]);
  CHECK(bytes[8] == '{');
  CHECK(bytes.size() == 8 + len + 4 * net.num_params());
}

TEST_CASE("corrupted checkpoints are rejected") {
  const Network net = make_net(ArchId::mlp2, {1, 4, 4}, 3, 1);
  const std::string bytes = encode_checkpoint({net, std::nullopt, nullptr, "trained"});
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 1)), CheckpointError);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, 4)), CheckpointError);
  std::string bad = bytes;
  bad[9] = '#';
  CHECK_THROWS_AS(decode_checkpoint(bad), CheckpointError);
}

TEST_CASE("save and load through a file") {
  const auto path = std::filesystem::temp_directory_path() / "mad_ckpt_test.ckpt";
  const Network net = make_net(ArchId::convnet4, {1, 16, 16}, 10, 9);
  save_checkpoint({net, std::nullopt, nullptr, "trained"}, path);
  const Checkpoint c = load_checkpoint(path);
  CHECK(encode_checkpoint(c) == encode_checkpoint({net, std::nullopt, nullptr, "trained"}));
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
}
