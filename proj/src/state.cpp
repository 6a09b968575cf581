// SPDX-License-Identifier: Apache-2.0
#include "itrain/state.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "itrain/codec.hpp"
#include "itrain/error.hpp"

namespace itrain {

namespace {

constexpr std::string_view kCheckpointMagic = "ITRAIN-CHECKPOINT 1";

Json buffers_to_json(const ParamBuffers& buffers) {
    Json out = Json::array();
    for (const auto& b : buffers) {
        out.push_back({{"weight", encode_f64(b.weight)}, {"bias", encode_f64(b.bias)}});
    }
    return out;
}

ParamBuffers buffers_from_json(const Json& j) {
    ParamBuffers out;
    for (const auto& b : j) {
        out.push_back({decode_f64(b.at("weight").get<std::string>()), decode_f64(b.at("bias").get<std::string>())});
    }
    return out;
}

Json optional_number(const std::optional<double>& v) {
    return v ? Json(*v) : Json(nullptr);
}

std::optional<double> optional_number(const Json& j) {
    if (j.is_null()) {
        return std::nullopt;
    }
    return j.get<double>();
}

std::string read_header_line(std::string_view& text) {
    const auto nl = text.find('\n');
    if (nl == std::string_view::npos) {
        throw Error(ErrorCode::corrupt_checkpoint, "truncated checkpoint header");
    }
    std::string line(text.substr(0, nl));
    text.remove_prefix(nl + 1);
    return line;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error(ErrorCode::io_error, "cannot read " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

Json state_to_json(const TrainerState& state) {
    Json model = Json::array();
    for (const Layer& layer : state.model.layers) {
        model.push_back({
            {"name", layer.name},
            {"inputs", layer.inputs},
            {"outputs", layer.outputs},
            {"weight", encode_f64(layer.weight)},
            {"bias", encode_f64(layer.bias)},
            {"activation", to_string(layer.activation)},
            {"dropout_rate", optional_number(layer.dropout_rate)},
        });
    }

    Json sources = Json::object();
    for (const auto& [name, examples] : state.dataset.sources()) {
        std::vector<double> xs;
        std::vector<double> ys;
        std::vector<std::uint64_t> generations;
        for (const Example& e : examples) {
            xs.push_back(e.sample.x);
            ys.push_back(e.sample.y);
            generations.push_back(e.generation);
        }
        sources[name] = {{"x", encode_f64(xs)}, {"y", encode_f64(ys)}, {"generation", generations}};
    }
    Json weights = Json::object();
    for (const auto& [name, w] : state.dataset.weights()) {
        weights[name] = w;
    }

    const auto& rng = state.rng.state();
    return {
        {"step", state.step},
        {"branch_id", state.branch_id},
        {"eval_cadence", state.eval_cadence},
        {"schedule_active", state.schedule_active},
        {"rng", {rng[0], rng[1], rng[2], rng[3]}},
        {"model", model},
        {"optimizer",
         {
             {"lr", state.optimizer.lr},
             {"momentum", state.optimizer.momentum},
             {"weight_decay", state.optimizer.weight_decay},
             {"grad_clip", optional_number(state.optimizer.grad_clip)},
             {"velocity", buffers_to_json(state.optimizer.velocity)},
         }},
        {"dataset", {{"generation", state.dataset.generation()}, {"weights", weights}, {"sources", sources}}},
    };
}

TrainerState state_from_json(const Json& j) {
    try {
        TrainerState state;
        state.step = j.at("step").get<std::uint64_t>();
        state.branch_id = j.at("branch_id").get<std::string>();
        state.eval_cadence = j.at("eval_cadence").get<std::uint64_t>();
        state.schedule_active = j.at("schedule_active").get<bool>();
        const auto& rng = j.at("rng");
        state.rng = Rng::from_state({rng.at(0).get<std::uint64_t>(), rng.at(1).get<std::uint64_t>(),
                                     rng.at(2).get<std::uint64_t>(), rng.at(3).get<std::uint64_t>()});
        for (const auto& l : j.at("model")) {
            Layer layer;
            layer.name = l.at("name").get<std::string>();
            layer.inputs = l.at("inputs").get<std::size_t>();
            layer.outputs = l.at("outputs").get<std::size_t>();
            layer.weight = decode_f64(l.at("weight").get<std::string>());
            layer.bias = decode_f64(l.at("bias").get<std::string>());
            auto act = parse_activation(l.at("activation").get<std::string>());
            if (!act) {
                throw Error(ErrorCode::corrupt_checkpoint, "unknown activation in layer " + layer.name);
            }
            layer.activation = *act;
            layer.dropout_rate = optional_number(l.at("dropout_rate"));
            state.model.layers.push_back(std::move(layer));
        }
        const auto& opt = j.at("optimizer");
        state.optimizer.lr = opt.at("lr").get<double>();
        state.optimizer.momentum = opt.at("momentum").get<double>();
        state.optimizer.weight_decay = opt.at("weight_decay").get<double>();
        state.optimizer.grad_clip = optional_number(opt.at("grad_clip"));
        state.optimizer.velocity = buffers_from_json(opt.at("velocity"));
        if (!same_shape(state.model, state.optimizer.velocity)) {
            throw Error(ErrorCode::corrupt_checkpoint, "velocity shape does not match model");
        }

        const auto& ds = j.at("dataset");
        std::map<std::string, std::vector<Example>, std::less<>> sources;
        for (const auto& [name, src] : ds.at("sources").items()) {
            const auto xs = decode_f64(src.at("x").get<std::string>());
            const auto ys = decode_f64(src.at("y").get<std::string>());
            const auto gens = src.at("generation").get<std::vector<std::uint64_t>>();
            if (xs.size() != ys.size() || xs.size() != gens.size()) {
                throw Error(ErrorCode::corrupt_checkpoint, "dataset source " + name + " has ragged columns");
            }
            std::vector<Example> examples;
            for (std::size_t i = 0; i < xs.size(); ++i) {
                examples.push_back({{xs[i], ys[i]}, name, gens[i]});
            }
            sources.emplace(name, std::move(examples));
        }
        InteractiveDataset::Weights weights;
        for (const auto& [name, w] : ds.at("weights").items()) {
            weights.emplace(name, w.get<double>());
        }
        state.dataset =
            InteractiveDataset::restore(std::move(sources), std::move(weights), ds.at("generation").get<std::uint64_t>());
        return state;
    } catch (const Json::exception& e) {
        throw Error(ErrorCode::corrupt_checkpoint, std::string("malformed trainer state: ") + e.what());
    }
}

std::string serialize_checkpoint(const Checkpoint& checkpoint) {
    const Json body_json = {
        {"uuid", checkpoint.uuid},
        {"branch_id", checkpoint.branch_id},
        {"step", checkpoint.step},
        {"created_at", checkpoint.created_at},
        {"state", state_to_json(checkpoint.state)},
    };
    const std::string body = body_json.dump();
    std::string out;
    out += kCheckpointMagic;
    out += "\nconfig_hash ";
    out += checkpoint.config_hash;
    out += "\nchecksum sha256:";
    out += sha256_hex(body);
    out += "\n\n";
    out += body;
    out += '\n';
    return out;
}

Checkpoint parse_checkpoint(std::string_view text) {
    if (read_header_line(text) != kCheckpointMagic) {
        throw Error(ErrorCode::corrupt_checkpoint, "not a checkpoint file (bad magic or version)");
    }
    const std::string hash_line = read_header_line(text);
    const std::string sum_line = read_header_line(text);
    if (!hash_line.starts_with("config_hash ") || !sum_line.starts_with("checksum sha256:") ||
        !read_header_line(text).empty()) {
        throw Error(ErrorCode::corrupt_checkpoint, "malformed checkpoint header");
    }
    if (!text.ends_with('\n')) {
        throw Error(ErrorCode::corrupt_checkpoint, "truncated checkpoint body");
    }
    const std::string_view body = text.substr(0, text.size() - 1);
    if (sha256_hex(body) != sum_line.substr(std::string_view("checksum sha256:").size())) {
        throw Error(ErrorCode::corrupt_checkpoint, "checkpoint checksum mismatch");
    }
    Json j;
    try {
        j = Json::parse(body);
    } catch (const Json::parse_error& e) {
        throw Error(ErrorCode::corrupt_checkpoint, std::string("checkpoint body is not JSON: ") + e.what());
    }
    Checkpoint checkpoint;
    try {
        checkpoint.uuid = j.at("uuid").get<std::string>();
        checkpoint.branch_id = j.at("branch_id").get<std::string>();
        checkpoint.step = j.at("step").get<std::uint64_t>();
        checkpoint.created_at = j.at("created_at").get<double>();
    } catch (const Json::exception& e) {
        throw Error(ErrorCode::corrupt_checkpoint, std::string("malformed checkpoint body: ") + e.what());
    }
    checkpoint.config_hash = hash_line.substr(std::string_view("config_hash ").size());
    checkpoint.state = state_from_json(j.at("state"));
    return checkpoint;
}

CheckpointStore::CheckpointStore(std::filesystem::path dir) : dir_(std::move(dir)) {}

std::filesystem::path CheckpointStore::path_for(const std::string& uuid) const {
    return dir_ / (uuid + ".ckpt");
}

bool CheckpointStore::contains(const std::string& uuid) const {
    return std::filesystem::exists(path_for(uuid));
}

Checkpoint CheckpointStore::save(const TrainerState& state, const std::string& config_hash,
                                 std::optional<std::string> uuid) {
    Checkpoint checkpoint;
    checkpoint.uuid = uuid ? std::move(*uuid) : random_uuid();
    if (checkpoint.uuid.empty() || checkpoint.uuid.find_first_of("/\\") != std::string::npos ||
        checkpoint.uuid.starts_with(".")) {
        throw Error(ErrorCode::invalid_value, "checkpoint uuid is not a valid file name", "uuid");
    }
    checkpoint.branch_id = state.branch_id;
    checkpoint.step = state.step;
    checkpoint.created_at = unix_now();
    checkpoint.config_hash = config_hash;
    checkpoint.state = state;
    checkpoint.state.paused = false;
    checkpoint.state.stopping = false;

    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    const auto final_path = path_for(checkpoint.uuid);
    const auto tmp_path = final_path.string() + ".tmp";
    {
        std::ofstream out(tmp_path, std::ios::binary | std::ios::trunc);
        out << serialize_checkpoint(checkpoint);
        out.flush();
        if (!out) {
            throw Error(ErrorCode::io_error, "failed writing checkpoint " + tmp_path);
        }
    }
    std::filesystem::rename(tmp_path, final_path, ec);
    if (ec) {
        throw Error(ErrorCode::io_error, "failed to finalize checkpoint: " + ec.message());
    }
    return checkpoint;
}

Checkpoint CheckpointStore::load(const std::string& uuid) const {
    if (uuid.empty() || uuid.find_first_of("/\\") != std::string::npos || !contains(uuid)) {
        throw Error(ErrorCode::unknown_checkpoint, "unknown checkpoint \"" + uuid + "\"", "uuid");
    }
    Checkpoint checkpoint = parse_checkpoint(read_file(path_for(uuid)));
    if (checkpoint.uuid != uuid) {
        throw Error(ErrorCode::corrupt_checkpoint, "checkpoint file uuid does not match its name");
    }
    return checkpoint;
}

BranchRegistry::BranchRegistry() {
    nodes_.push_back({"b0", std::nullopt, 0, std::nullopt, unix_now()});
}

const BranchNode& BranchRegistry::fork(const std::string& parent, std::uint64_t fork_step,
                                       const std::string& checkpoint_uuid) {
    if (find(parent) == nullptr) {
        throw Error(ErrorCode::invalid_value, "unknown parent branch \"" + parent + "\"", "branch_id");
    }
    const auto children = std::count_if(nodes_.begin(), nodes_.end(),
                                        [&](const BranchNode& n) { return n.parent_branch_id == parent; });
    nodes_.push_back({parent + "." + std::to_string(children + 1), parent, fork_step, checkpoint_uuid, unix_now()});
    return nodes_.back();
}

const BranchNode* BranchRegistry::find(std::string_view id) const {
    auto it = std::find_if(nodes_.begin(), nodes_.end(), [&](const BranchNode& n) { return n.branch_id == id; });
    return it == nodes_.end() ? nullptr : &*it;
}

bool BranchRegistry::is_tree() const {
    std::size_t roots = 0;
    std::set<std::string> seen;
    for (const auto& node : nodes_) {
        if (!seen.insert(node.branch_id).second) {
            return false;
        }
        if (!node.parent_branch_id) {
            ++roots;
        } else if (!seen.contains(*node.parent_branch_id)) {
            // Parents are always created before children, so this also rules out cycles.
            return false;
        }
    }
    return roots == 1;
}

Json branch_to_json(const BranchNode& node) {
    return {
        {"branch_id", node.branch_id},
        {"parent_branch_id", node.parent_branch_id ? Json(*node.parent_branch_id) : Json(nullptr)},
        {"fork_step", node.fork_step},
        {"fork_checkpoint_uuid", node.fork_checkpoint_uuid ? Json(*node.fork_checkpoint_uuid) : Json(nullptr)},
        {"created_at", node.created_at},
    };
}

Json BranchRegistry::to_json() const {
    Json out = Json::array();
    for (const auto& node : nodes_) {
        out.push_back(branch_to_json(node));
    }
    return out;
}

InterventionLog::InterventionLog(std::string config_hash) : config_hash_(std::move(config_hash)) {}

InterventionLog InterventionLog::create(const std::filesystem::path& path, std::string config_hash) {
    InterventionLog log(std::move(config_hash));
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    log.file_ = std::make_shared<std::ofstream>(path, std::ios::trunc);
    if (!*log.file_) {
        throw Error(ErrorCode::io_error, "cannot open intervention log " + path.string());
    }
    *log.file_ << Json{{"format", kFormat}, {"config_hash", log.config_hash_}}.dump() << '\n';
    log.file_->flush();
    return log;
}

std::string InterventionLog::entry_line(const InterventionEntry& entry) {
    const auto& e = entry.envelope;
    return Json{
        {"applied_at_step", entry.applied_at_step},
        {"branch_id", entry.branch_id},
        {"envelope",
         {{"command", e.command}, {"args", e.args}, {"time", e.time}, {"uuid", e.uuid},
          {"status", to_string(e.status)}}},
    }
        .dump();
}

InterventionEntry InterventionLog::parse_entry_line(std::string_view line, const CommandRegistry& registry) {
    try {
        const Json j = Json::parse(line);
        InterventionEntry entry;
        entry.applied_at_step = j.at("applied_at_step").get<std::uint64_t>();
        entry.branch_id = j.at("branch_id").get<std::string>();
        entry.envelope = decode_command(j.at("envelope").dump(), registry);
        return entry;
    } catch (const Json::exception& e) {
        throw Error(ErrorCode::parse_error, std::string("malformed intervention entry: ") + e.what());
    }
}

void InterventionLog::append(InterventionEntry entry) {
    if (!entries_.empty()) {
        const auto& last = entries_.back();
        if (entry.branch_id == last.branch_id && entry.applied_at_step < last.applied_at_step) {
            throw Error(ErrorCode::invalid_value, "intervention entries must be appended in application order");
        }
    }
    if (file_) {
        *file_ << entry_line(entry) << '\n';
        file_->flush();
        if (!*file_) {
            throw Error(ErrorCode::io_error, "failed writing intervention log");
        }
    }
    entries_.push_back(std::move(entry));
}

InterventionLog InterventionLog::read(const std::filesystem::path& path, const CommandRegistry& registry) {
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::io_error, "cannot read intervention log " + path.string());
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw Error(ErrorCode::parse_error, "intervention log is empty");
    }
    std::string hash;
    try {
        const Json header = Json::parse(line);
        if (header.at("format").get<std::string>() != kFormat) {
            throw Error(ErrorCode::parse_error, "unsupported intervention log format");
        }
        hash = header.at("config_hash").get<std::string>();
    } catch (const Json::exception& e) {
        throw Error(ErrorCode::parse_error, std::string("malformed intervention log header: ") + e.what());
    }
    InterventionLog log(hash);
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        log.entries_.push_back(parse_entry_line(line, registry));
    }
    return log;
}

std::string metric_line(const TrainingEvent& event) {
    return event.payload.dump();
}

}  // namespace itrain
