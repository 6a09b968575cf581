// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "itrain/protocol.hpp"
#include "itrain/trainer_state.hpp"

namespace itrain {

/// Canonical JSON for a TrainerState. float64 arrays are base64 little-endian.
[[nodiscard]] Json state_to_json(const TrainerState& state);
[[nodiscard]] TrainerState state_from_json(const Json& j);

struct Checkpoint {
    std::string uuid;
    std::string branch_id;
    std::uint64_t step = 0;
    double created_at = 0.0;
    std::string config_hash;
    TrainerState state;
};

/// Header lines (magic + version, config hash, body checksum), blank line,
/// canonical JSON body.
[[nodiscard]] std::string serialize_checkpoint(const Checkpoint& checkpoint);

/// Throws Error(corrupt_checkpoint) on a bad header or checksum mismatch.
[[nodiscard]] Checkpoint parse_checkpoint(std::string_view text);

/// Checkpoint files under `<dir>/<uuid>.ckpt`.
class CheckpointStore {
public:
    explicit CheckpointStore(std::filesystem::path dir);

    /// Uses `uuid` when given, otherwise a fresh random one.
    Checkpoint save(const TrainerState& state, const std::string& config_hash,
                    std::optional<std::string> uuid = std::nullopt);

    /// Throws Error(unknown_checkpoint) or Error(corrupt_checkpoint).
    [[nodiscard]] Checkpoint load(const std::string& uuid) const;

    [[nodiscard]] bool contains(const std::string& uuid) const;
    [[nodiscard]] std::filesystem::path path_for(const std::string& uuid) const;
    [[nodiscard]] const std::filesystem::path& dir() const noexcept { return dir_; }

private:
    std::filesystem::path dir_;
};

struct BranchNode {
    std::string branch_id;
    std::optional<std::string> parent_branch_id;
    std::uint64_t fork_step = 0;
    std::optional<std::string> fork_checkpoint_uuid;
    double created_at = 0.0;
};

/// Fork tree. Root is "b0"; children of X are "X.1", "X.2", ... in creation order.
class BranchRegistry {
public:
    BranchRegistry();

    const BranchNode& fork(const std::string& parent, std::uint64_t fork_step, const std::string& checkpoint_uuid);

    [[nodiscard]] const BranchNode* find(std::string_view id) const;
    [[nodiscard]] const std::vector<BranchNode>& nodes() const noexcept { return nodes_; }
    [[nodiscard]] bool is_tree() const;
    [[nodiscard]] Json to_json() const;

private:
    std::vector<BranchNode> nodes_;
};

[[nodiscard]] Json branch_to_json(const BranchNode& node);

struct InterventionEntry {
    std::uint64_t applied_at_step = 0;
    std::string branch_id;
    CommandEnvelope envelope;

    friend bool operator==(const InterventionEntry&, const InterventionEntry&) = default;
};

/// Ordered, append-only record of applied commands. When attached to a file
/// every append is written and flushed before returning.
class InterventionLog {
public:
    static constexpr const char* kFormat = "itrain-interventions/1";

    explicit InterventionLog(std::string config_hash);

    /// Starts a new file (truncating) and writes the header line.
    static InterventionLog create(const std::filesystem::path& path, std::string config_hash);
    /// Parses a log file. Throws Error(parse_error) on malformed lines.
    static InterventionLog read(const std::filesystem::path& path,
                                const CommandRegistry& registry = default_registry());

    void append(InterventionEntry entry);

    [[nodiscard]] const std::vector<InterventionEntry>& entries() const noexcept { return entries_; }
    [[nodiscard]] const std::string& config_hash() const noexcept { return config_hash_; }

    [[nodiscard]] static std::string entry_line(const InterventionEntry& entry);
    [[nodiscard]] static InterventionEntry parse_entry_line(std::string_view line,
                                                            const CommandRegistry& registry = default_registry());

private:
    std::string config_hash_;
    std::vector<InterventionEntry> entries_;
    std::shared_ptr<std::ofstream> file_;
};

/// One line of metrics/<branch>.jsonl or metrics/<branch>.eval.jsonl.
[[nodiscard]] std::string metric_line(const TrainingEvent& event);

}  // namespace itrain
