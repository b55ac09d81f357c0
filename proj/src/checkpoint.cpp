/*
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include "m3dbfs/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace m3dbfs {

namespace {

constexpr char kMagic[4] = {'M', '3', 'D', 'B'};

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

/// Cursor over the loaded bytes; every read error reports the byte offset.
struct Reader {
    const std::string& data;
    std::size_t pos = 0;
    const std::string& path;

    void need(std::size_t n, const char* what) {
        if (pos + n > data.size())
            throw std::runtime_error("checkpoint: truncated " + std::string(what) +
                                     " at byte offset " + std::to_string(pos) + " in " + path);
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<std::uint8_t>(data[pos++]);
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(data[pos++])) << (8 * i);
        return v;
    }
    double f64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(data[pos++])) << (8 * i);
        return std::bit_cast<double>(v);
    }
    std::string bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string s = data.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace

Checkpoint checkpoint_from_store(const ParameterStore& store, std::uint8_t stage,
                                 const std::string& config_echo) {
    Checkpoint ckpt;
    ckpt.stage = stage;
    ckpt.config_echo = config_echo;
    for (const ParamEntry& e : store.entries())
        ckpt.records.push_back({e.name, e.frozen, e.tensor->shape, e.tensor->values});
    return ckpt;
}

void apply_checkpoint_to_store(const Checkpoint& ckpt, ParameterStore& store) {
    for (const Checkpoint::Record& r : ckpt.records) {
        if (!store.has(r.name))
            throw std::runtime_error("checkpoint: parameter " + r.name +
                                     " is not present in the model");
        const TensorPtr& t = store.get(r.name);
        if (t->shape != r.shape)
            throw std::runtime_error("checkpoint: shape mismatch for " + r.name);
        t->values = r.values;
        store.set_frozen(r.name, r.frozen);
    }
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::string out;
    out.append(kMagic, 4);
    put_u32(out, ckpt.version);
    out.push_back(static_cast<char>(ckpt.stage));
    put_u32(out, static_cast<std::uint32_t>(ckpt.records.size()));
    for (const Checkpoint::Record& r : ckpt.records) {
        put_u32(out, static_cast<std::uint32_t>(r.name.size()));
        out += r.name;
        out.push_back(r.frozen ? 1 : 0);
        put_u32(out, static_cast<std::uint32_t>(r.shape.size()));
        std::size_t n = 1;
        for (std::size_t ext : r.shape) {
            put_u32(out, static_cast<std::uint32_t>(ext));
            n *= ext;
        }
        if (n != r.values.size())
            throw std::runtime_error("checkpoint: record " + r.name + " shape/value mismatch");
        for (double v : r.values) put_f64(out, v);
    }
    put_u32(out, static_cast<std::uint32_t>(ckpt.config_echo.size()));
    out += ckpt.config_echo;

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f.good()) throw std::runtime_error("checkpoint: cannot open " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f.good()) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f.good()) throw std::runtime_error("checkpoint: cannot open " + path);
    std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Reader rd{data, 0, path};

    std::string magic = rd.bytes(4, "magic");
    if (std::memcmp(magic.data(), kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    Checkpoint ckpt;
    ckpt.version = rd.u32("version");
    if (ckpt.version != Checkpoint::kFormatVersion)
        throw std::runtime_error("checkpoint: unsupported format version " +
                                 std::to_string(ckpt.version) + " in " + path);
    ckpt.stage = rd.u8("stage tag");
    std::uint32_t count = rd.u32("record count");
    ckpt.records.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        Checkpoint::Record r;
        std::uint32_t name_len = rd.u32("name length");
        r.name = rd.bytes(name_len, "name");
        r.frozen = rd.u8("freeze flag") != 0;
        std::uint32_t rank = rd.u32("rank");
        std::size_t n = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            std::uint32_t ext = rd.u32("extent");
            if (ext == 0)
                throw std::runtime_error("checkpoint: zero extent in record " + r.name +
                                         " at byte offset " + std::to_string(rd.pos) + " in " +
                                         path);
            r.shape.push_back(ext);
            n *= ext;
        }
        r.values.resize(n);
        for (std::size_t v = 0; v < n; ++v) r.values[v] = rd.f64("values");
        ckpt.records.push_back(std::move(r));
    }
    std::uint32_t echo_len = rd.u32("config echo length");
    ckpt.config_echo = rd.bytes(echo_len, "config echo");
    return ckpt;
}

void expect_stage(const Checkpoint& ckpt, std::uint8_t stage) {
    if (ckpt.stage != stage)
        throw std::runtime_error("checkpoint: expected a stage " + std::to_string(stage) +
                                 " checkpoint but found stage " + std::to_string(ckpt.stage));
}

}  // namespace m3dbfs
