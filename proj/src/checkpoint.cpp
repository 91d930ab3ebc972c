// Copyright 2026 The CAST Authors. All rights reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "cast/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace cast {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[8] = {'C', 'A', 'S', 'T', 'C', 'K', 'P', 'T'};
// Counters are stored as f32 and must stay exactly representable.
constexpr std::int64_t kMaxCounter = std::int64_t{1} << 24;

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(std::string bytes, std::string where) : bytes_(std::move(bytes)), where_(std::move(where)) {}

  template <typename T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }
  const char* take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw CheckpointError(where_ + ": truncated checkpoint");
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string bytes_;
  std::string where_;
  std::size_t pos_ = 0;
};

ad::TensorF counters(std::initializer_list<std::int64_t> values) {
  Eigen::VectorXf v(static_cast<Eigen::Index>(values.size()));
  Eigen::Index i = 0;
  for (std::int64_t x : values) {
    if (x < 0 || x >= kMaxCounter) throw CheckpointError("checkpoint: counter " + std::to_string(x) + " out of range");
    v(i++) = static_cast<float>(x);
  }
  return ad::TensorF({v.size()}, v);
}

}  // namespace

void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xFFFF) throw CheckpointError("checkpoint: tensor name too long");
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (ad::Index d : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    out.append(reinterpret_cast<const char*>(t.values().data()), static_cast<std::size_t>(t.numel()) * sizeof(float));
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write to a sibling and rename so an interrupted save never leaves a torn file.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::vector<NamedTensor> load_tensors(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  Reader r({std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()}, path.string());
  if (std::memcmp(r.take(sizeof(kMagic)), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError(path.string() + ": not a checkpoint (bad magic)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError(path.string() + ": unsupported version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>();
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint16_t>();
    std::string name(r.take(len), len);
    const auto rank = r.get<std::uint8_t>();
    ad::Shape shape;
    std::size_t numel = 1;
    for (int d = 0; d < rank; ++d) {
      shape.push_back(r.get<std::uint32_t>());
      numel *= static_cast<std::size_t>(shape.back());
    }
    if (numel > (std::size_t{1} << 31)) throw CheckpointError(path.string() + ": tensor " + name + " too large");
    Eigen::VectorXf v(static_cast<Eigen::Index>(numel));
    std::memcpy(v.data(), r.take(numel * sizeof(float)), numel * sizeof(float));
    out.push_back({std::move(name), ad::TensorF(shape, std::move(v))});
  }
  if (!r.done()) throw CheckpointError(path.string() + ": trailing bytes");
  return out;
}

std::vector<NamedTensor> pack_train_state(const TrainState& state) {
  std::vector<NamedTensor> out;
  const auto& q = state.encoders.query;
  const auto& k = state.encoders.key;
  for (std::size_t i = 0; i < q.size(); ++i) out.push_back({"query." + q.names()[i], ad::TensorF(q[i].shape(), q[i].values())});
  for (std::size_t i = 0; i < k.size(); ++i) out.push_back({"key." + k.names()[i], ad::TensorF(k[i].shape(), k[i].values())});
  for (std::size_t i = 0; i < state.optimizer.velocity.size(); ++i) {
    out.push_back({"velocity." + q.names()[i], ad::TensorF(q[i].shape(), state.optimizer.velocity[i])});
  }
  const RowMatrixF& storage = state.queue.storage();
  out.push_back({"queue.storage", ad::TensorF({storage.rows(), storage.cols()},
                                               Eigen::Map<const Eigen::VectorXf>(storage.data(), storage.size()))});
  out.push_back({"queue.position", counters({state.queue.cursor(), state.queue.fill()})});
  out.push_back({"train.counters", counters({state.step, state.skipped})});
  return out;
}

TrainState unpack_train_state(const std::vector<NamedTensor>& tensors, const EncoderConfig& encoder, float momentum) {
  std::map<std::string, const ad::TensorF*> by_name;
  for (const auto& t : tensors) {
    if (!by_name.emplace(t.name, &t.value).second) throw CheckpointError("checkpoint: duplicate tensor " + t.name);
  }
  auto take = [&](const std::string& name) -> const ad::TensorF& {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("checkpoint: missing tensor " + name);
    const ad::TensorF* t = it->second;
    by_name.erase(it);
    return *t;
  };
  const auto layout = init_params<float>(encoder, 0, false);
  auto params = [&](const std::string& prefix, bool requires_grad) {
    ParameterSet<float> p;
    for (std::size_t i = 0; i < layout.size(); ++i) {
      const auto& t = take(prefix + layout.names()[i]);
      if (t.shape() != layout[i].shape()) {
        throw CheckpointError("checkpoint: " + prefix + layout.names()[i] + " has shape " + ad::to_string(t.shape()) +
                              ", expected " + ad::to_string(layout[i].shape()));
      }
      p.add(layout.names()[i], ad::TensorF(t.shape(), t.values(), requires_grad));
    }
    return p;
  };
  MomentumPair encoders{params("query.", true), params("key.", false), momentum};
  ad::SgdState<float> optimizer;
  if (by_name.count("velocity." + layout.names()[0])) {
    for (std::size_t i = 0; i < layout.size(); ++i) {
      const auto& v = take("velocity." + layout.names()[i]);
      if (v.shape() != layout[i].shape()) throw CheckpointError("checkpoint: velocity shape mismatch");
      optimizer.velocity.push_back(v.values());
    }
  }
  const auto& storage = take("queue.storage");
  const auto& position = take("queue.position");
  const auto& train = take("train.counters");
  if (storage.rank() != 2 || storage.dim(1) != encoder.embedding_dim || position.numel() != 2 || train.numel() != 2) {
    throw CheckpointError("checkpoint: malformed queue or counters");
  }
  RowMatrixF slots = Eigen::Map<const RowMatrixF>(storage.values().data(), storage.dim(0), storage.dim(1));
  auto queue = [&]() {
    try {
      return NegativeQueue::restore(std::move(slots), static_cast<Eigen::Index>(position[0]),
                                    static_cast<Eigen::Index>(position[1]));
    } catch (const std::invalid_argument& e) {
      throw CheckpointError(std::string("checkpoint: ") + e.what());
    }
  }();
  if (!by_name.empty()) throw CheckpointError("checkpoint: unexpected tensor " + by_name.begin()->first);
  return TrainState{encoder,
                    std::move(encoders),
                    std::move(queue),
                    std::move(optimizer),
                    static_cast<std::int64_t>(train[0]),
                    static_cast<std::int64_t>(train[1])};
}

void save_checkpoint(const std::filesystem::path& path, const TrainState& state) {
  save_tensors(path, pack_train_state(state));
}

TrainState load_checkpoint(const std::filesystem::path& path, const EncoderConfig& encoder, float momentum) {
  return unpack_train_state(load_tensors(path), encoder, momentum);
}

}  // namespace cast
