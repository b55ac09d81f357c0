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
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "m3dbfs/params.hpp"

namespace m3dbfs {

/// Serializable snapshot of a parameter store.
///
/// Binary layout (little-endian): magic "M3DB", u32 format version, u8 stage
/// tag, u32 record count; per record u32 name length, UTF-8 name, u8 freeze
/// flag, u32 rank, u32 extents, then float64 values row-major. After the
/// records a u32-length-prefixed UTF-8 config echo records the settings the
/// checkpoint was produced with.
struct Checkpoint {
    static constexpr std::uint32_t kFormatVersion = 1;

    std::uint32_t version = kFormatVersion;
    std::uint8_t stage = 1;

    struct Record {
        std::string name;
        bool frozen = false;
        std::vector<std::size_t> shape;
        std::vector<double> values;
    };
    std::vector<Record> records;
    std::string config_echo;
};

/// Snapshot every parameter of the store in registration order.
Checkpoint checkpoint_from_store(const ParameterStore& store, std::uint8_t stage,
                                 const std::string& config_echo);

/// Copy record values into same-named store parameters and apply the stored
/// freeze flags. Throws if a record is missing from the store or shapes
/// disagree.
void apply_checkpoint_to_store(const Checkpoint& ckpt, ParameterStore& store);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Throws unless the checkpoint carries the expected stage tag; the message
/// names both stages so callers can surface the missing prerequisite.
void expect_stage(const Checkpoint& ckpt, std::uint8_t stage);

}  // namespace m3dbfs
