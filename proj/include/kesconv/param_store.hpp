// SPDX-License-Identifier: Apache-2.0
//
// Named parameter registry plus the on-disk checkpoint format.
//
// A checkpoint is a directory holding:
//   manifest.json  ordered list of {name, dtype, shape}, dtype always "f64"
//   params.bin     the tensors' raw buffers, concatenated in manifest order,
//                  little-endian IEEE-754 doubles, no padding or framing
// Loading restores values into an already-built store and demands an exact
// match of names, order, dtypes, shapes, and payload size.

#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "kesconv/common.hpp"
#include "kesconv/tensor.hpp"

namespace kesconv {

class ParamStore {
public:
    // Registration order is the checkpoint order; names must be unique.
    Tensor& add(const std::string& name, Tensor t) {
        if (index_.count(name)) {
            throw ConfigError("duplicate parameter name: " + name);
        }
        index_[name] = names_.size();
        names_.push_back(name);
        params_.push_back(std::move(t));
        return params_.back();
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Tensor& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) {
            throw ConfigError("unknown parameter: " + name);
        }
        return params_[it->second];
    }

    const Tensor& get(const std::string& name) const {
        return const_cast<ParamStore*>(this)->get(name);
    }

    const std::vector<std::string>& names() const { return names_; }
    std::size_t size() const { return names_.size(); }
    Tensor& at(std::size_t i) { return params_.at(i); }
    const std::string& name_at(std::size_t i) const { return names_.at(i); }

    // Frozen parameters are stored and hashed but never handed to the
    // optimizer, and their grad buffers stay empty because requires_grad is
    // false on the underlying tensor.
    void freeze(const std::string& name) {
        get(name).node()->requires_grad = false;
        frozen_.insert(name);
    }

    bool is_frozen(const std::string& name) const { return frozen_.count(name) != 0; }

    std::vector<std::string> trainable_names() const {
        std::vector<std::string> out;
        for (const auto& n : names_) {
            if (!frozen_.count(n)) {
                out.push_back(n);
            }
        }
        return out;
    }

    void zero_grads() {
        for (auto& p : params_) {
            p.zero_grad();
        }
    }

    std::size_t total_numel() const {
        std::size_t n = 0;
        for (const auto& p : params_) {
            n += static_cast<std::size_t>(p.numel());
        }
        return n;
    }

    // FNV-1a over the raw little-endian bytes of every parameter whose name
    // starts with `prefix`, in store order. With prefix "" this fingerprints
    // the whole store.
    uint64_t hash_prefix(const std::string& prefix) const {
        uint64_t h = 0xcbf29ce484222325ull;
        bool any = false;
        for (std::size_t i = 0; i < names_.size(); ++i) {
            if (names_[i].rfind(prefix, 0) != 0) {
                continue;
            }
            any = true;
            const auto& d = params_[i].data();
            h = fnv1a64(d.data(), d.size() * sizeof(double), h);
        }
        if (!any) {
            throw ConfigError("hash_prefix: no parameters match prefix '" + prefix + "'");
        }
        return h;
    }

    void save(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        nlohmann::json manifest;
        manifest["format"] = "kesconv-checkpoint-v1";
        manifest["params"] = nlohmann::json::array();
        for (std::size_t i = 0; i < names_.size(); ++i) {
            nlohmann::json e;
            e["name"] = names_[i];
            e["dtype"] = "f64";
            e["shape"] = params_[i].shape();
            manifest["params"].push_back(e);
        }
        {
            std::ofstream mf(dir / "manifest.json");
            if (!mf) {
                throw DataError("cannot write " + (dir / "manifest.json").string());
            }
            mf << manifest.dump(2) << "\n";
        }
        std::ofstream bf(dir / "params.bin", std::ios::binary);
        if (!bf) {
            throw DataError("cannot write " + (dir / "params.bin").string());
        }
        for (const auto& p : params_) {
            const auto& d = p.data();
            bf.write(reinterpret_cast<const char*>(d.data()),
                     static_cast<std::streamsize>(d.size() * sizeof(double)));
        }
        if (!bf) {
            throw DataError("short write to " + (dir / "params.bin").string());
        }
    }

    // Restores values in place. The store must already contain exactly the
    // manifest's parameters, in the same order and with the same shapes.
    void load(const std::filesystem::path& dir) {
        nlohmann::json manifest;
        {
            std::ifstream mf(dir / "manifest.json");
            if (!mf) {
                throw DataError("cannot open " + (dir / "manifest.json").string());
            }
            try {
                mf >> manifest;
            } catch (const nlohmann::json::exception& e) {
                throw DataError("malformed manifest.json: " + std::string(e.what()));
            }
        }
        if (!manifest.contains("params") || !manifest["params"].is_array()) {
            throw DataError("manifest.json missing 'params' array");
        }
        const auto& entries = manifest["params"];
        if (entries.size() != names_.size()) {
            throw DataError("checkpoint has " + std::to_string(entries.size()) +
                            " parameters, model has " + std::to_string(names_.size()));
        }
        for (std::size_t i = 0; i < entries.size(); ++i) {
            const auto& e = entries[i];
            const std::string name = e.at("name").get<std::string>();
            const std::string dtype = e.at("dtype").get<std::string>();
            const Shape shape = e.at("shape").get<Shape>();
            if (name != names_[i]) {
                throw DataError("checkpoint parameter " + std::to_string(i) + " is '" + name +
                                "', model expects '" + names_[i] + "'");
            }
            if (dtype != "f64") {
                throw DataError("parameter '" + name + "' has unsupported dtype '" + dtype + "'");
            }
            if (shape != params_[i].shape()) {
                throw DataError("parameter '" + name + "' has shape " + shape_str(shape) +
                                ", model expects " + shape_str(params_[i].shape()));
            }
        }
        std::ifstream bf(dir / "params.bin", std::ios::binary);
        if (!bf) {
            throw DataError("cannot open " + (dir / "params.bin").string());
        }
        bf.seekg(0, std::ios::end);
        const auto file_bytes = static_cast<std::size_t>(bf.tellg());
        bf.seekg(0, std::ios::beg);
        const std::size_t want = total_numel() * sizeof(double);
        if (file_bytes != want) {
            throw DataError("params.bin is " + std::to_string(file_bytes) + " bytes, expected " +
                            std::to_string(want));
        }
        for (auto& p : params_) {
            auto& d = p.data();
            bf.read(reinterpret_cast<char*>(d.data()),
                    static_cast<std::streamsize>(d.size() * sizeof(double)));
            if (!bf) {
                throw DataError("short read from " + (dir / "params.bin").string());
            }
        }
    }

private:
    std::vector<std::string> names_;
    std::vector<Tensor> params_;
    std::unordered_map<std::string, std::size_t> index_;
    std::unordered_set<std::string> frozen_;
};

}  // namespace kesconv
