// Copyright 2026 The PrivateXR Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Prediction service: HTTP endpoints plus a replaying /stream websocket whose
// privacy mode the client steers.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include "json.hpp"
#include "privatexr/common.hpp"
#include "privatexr/data.hpp"
#include "privatexr/nn.hpp"
#include "privatexr/pipeline.hpp"
#include "privatexr/privatizer.hpp"

namespace privatexr {

inline const std::vector<std::string>& serve_modes() {
  static const std::vector<std::string> modes{"off", "low", "medium", "high"};
  return modes;
}

inline const std::vector<std::string>& private_levels() {
  static const std::vector<std::string> levels{"low", "medium", "high"};
  return levels;
}

// ---------------------------------------------------------------------------
// Bundle

struct ServeLevel {
  TrainedModel model;
  FeatureDpSpec feature_dp;  // feature_dp.level names this mode
};

struct ServeBundle {
  std::vector<std::string> feature_names;
  std::vector<std::string> class_names;
  TrainedModel off;
  std::map<std::string, ServeLevel> levels;
  std::vector<int> selected;
  Dataset replay;
  double fps = 10.0;
  std::uint64_t seed = 0;

  // Dimension and completeness checks; a failing bundle is never served.
  void validate() const {
    const auto d = static_cast<int>(feature_names.size());
    const auto k = static_cast<int>(class_names.size());
    require(d > 0 && k > 1, ErrorKind::kDimension, "bundle needs feature and class names");
    auto check_model = [&](const TrainedModel& m, const std::string& name) {
      require(m.spec.input_dim == d, ErrorKind::kDimension,
              name + " model expects " + std::to_string(m.spec.input_dim) + " features, bundle has " +
                  std::to_string(d));
      require(m.spec.class_count == k, ErrorKind::kDimension,
              name + " model has " + std::to_string(m.spec.class_count) + " classes, bundle has " +
                  std::to_string(k));
      require(m.spec.time_steps == 1, ErrorKind::kDimension, name + " model must take single frames");
      Network(m.spec).check_params(m.params);
    };
    check_model(off, "off");
    for (const auto& name : private_levels()) {
      auto it = levels.find(name);
      require(it != levels.end(), ErrorKind::kConfig, "bundle lacks privacy level \"" + name + "\"");
      check_model(it->second.model, name);
      require(it->second.feature_dp.level == name, ErrorKind::kConfig,
              "level \"" + name + "\" carries a feature DP spec for \"" + it->second.feature_dp.level + "\"");
      it->second.feature_dp.validate(feature_names.size());
    }
    for (int j : selected)
      require(j >= 0 && j < d, ErrorKind::kDimension, "selected feature " + std::to_string(j) + " out of range");
    require(!replay.empty(), ErrorKind::kConfig, "bundle replay dataset is empty");
    require(replay.feature_count() == feature_names.size(), ErrorKind::kDimension,
            "replay dataset has " + std::to_string(replay.feature_count()) + " features, bundle has " +
                std::to_string(d));
    require(fps > 0.0, ErrorKind::kConfig, "stream fps must be positive");
  }
};

namespace detail {

inline TrainedModel model_ref_load(const nlohmann::json& j, const std::filesystem::path& dir) {
  if (j.is_string()) return load_model(dir / j.get<std::string>());
  return model_from_json(j);
}

}  // namespace detail

// Model entries are file names relative to the bundle or inline model documents.
inline ServeBundle bundle_from_json(const nlohmann::json& j, const std::filesystem::path& dir) {
  try {
    require(j.value("format", std::string()) == "privatexr-bundle", ErrorKind::kFormat,
            "not a privatexr bundle document");
    ServeBundle b;
    b.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    b.class_names = j.at("class_names").get<std::vector<std::string>>();
    b.off = detail::model_ref_load(j.at("off").at("model"), dir);
    for (const auto& [name, entry] : j.at("levels").items()) {
      ServeLevel lvl;
      lvl.model = detail::model_ref_load(entry.at("model"), dir);
      lvl.feature_dp = FeatureDpSpec::from_json(entry.at("feature_dp"));
      b.levels.emplace(name, std::move(lvl));
    }
    b.selected = j.value("selected_features", std::vector<int>{});
    DataSource src = DataSource::from_json(j.at("replay"));
    if (src.csv && src.csv->is_relative()) src.csv = dir / *src.csv;
    b.replay = src.load();
    if (src.synth && src.normalize != NormalizeMode::kNone) b.replay = normalize(b.replay);
    b.fps = j.value("fps", 10.0);
    b.seed = j.value("seed", std::uint64_t{0});
    return b;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("malformed bundle: ") + e.what());
  }
}

inline ServeBundle load_bundle(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kConfig, "cannot open bundle " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::kFormat, "bundle " + path.string() + " is not JSON: " + e.what());
  }
  return bundle_from_json(j, path.parent_path());
}

// Trains the default bundle: a non-private model for "off" and, per level, a
// DPSGD model at the level's epsilon trained on selectively privatized frames.
// Writes bundle.json, the models and replay.csv (the held-out split) to dir.
inline ServeBundle build_serve_bundle(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  for (const auto& name : private_levels())
    require(cfg.levels.count(name) == 1, ErrorKind::kConfig, "levels must define \"" + name + "\"");
  const std::uint64_t seed = cfg.seed;
  const PreparedData data = prepare_data(cfg);
  const ModelSpec spec = detail::stage("model", [&] { return resolve_model_spec(cfg.model, data.all); });
  const std::size_t d = data.all.feature_count();

  ServeBundle b;
  b.feature_names = data.all.feature_names;
  b.class_names = data.all.class_names;
  b.replay = data.test_split;
  b.seed = seed;
  b.off = detail::stage("train", [&] {
    TrainConfig tc = cfg.train;
    tc.dp.reset();
    tc.progress_log.reset();
    tc.seed = derive_seed(seed, "train");
    return train(data.target_train, empty_like(data.target_train), spec, tc);
  });
  const auto importance = detail::stage("explain", [&] {
    return reference_importance(data.target_train, spec, cfg.train, cfg.attribution, derive_seed(seed, "xai"));
  });
  b.selected = select_top_quarter(importance, d);

  for (const auto& name : private_levels()) {
    ServeLevel lvl;
    lvl.feature_dp.mode = DpMode::kSelective;
    lvl.feature_dp.selected = b.selected;
    lvl.feature_dp.levels = cfg.levels;
    lvl.feature_dp.level = name;
    lvl.feature_dp.delta = cfg.feature_delta;
    lvl.feature_dp.clamp = cfg.clamp;
    lvl.model = detail::stage("train", [&] {
      const FeaturePrivatizer priv(lvl.feature_dp, d);
      Dataset noisy = data.target_train;
      Rng rng = make_rng(derive_seed(derive_seed(seed, "feature-noise"), name));
      for (auto& f : noisy.frames) priv.apply(f.features, rng);
      TrainConfig tc = cfg.private_train;
      if (!tc.dp) tc.dp = DpTrainConfig{};
      tc.dp->target_epsilon = cfg.levels.at(name);
      tc.progress_log.reset();
      tc.seed = derive_seed(seed, "train");
      return train(noisy, empty_like(noisy), spec, tc);
    });
    b.levels.emplace(name, std::move(lvl));
  }
  b.validate();

  std::filesystem::create_directories(dir);
  nlohmann::json levels = nlohmann::json::object();
  save_model(b.off, dir / "off.model.json");
  for (const auto& [name, lvl] : b.levels) {
    save_model(lvl.model, dir / (name + ".model.json"));
    levels[name] = {{"model", name + ".model.json"}, {"feature_dp", lvl.feature_dp.to_json()}};
  }
  write_csv(b.replay, dir / "replay.csv");
  const nlohmann::json doc{{"format", "privatexr-bundle"},
                           {"feature_names", b.feature_names},
                           {"class_names", b.class_names},
                           {"off", {{"model", "off.model.json"}}},
                           {"levels", levels},
                           {"selected_features", b.selected},
                           {"replay", {{"csv", "replay.csv"}, {"normalize", "none"}}},
                           {"fps", b.fps},
                           {"seed", b.seed}};
  std::ofstream(dir / "bundle.json") << doc.dump(2) << '\n';
  return b;
}

// ---------------------------------------------------------------------------
// Predictor

struct ServePrediction {
  int cls = 0;
  std::string label;
  std::vector<double> proba;
  std::optional<double> epsilon;
  double latency_ms = 0.0;
};

// Immutable after construction; safe to share across connections.
class ServeModel {
 public:
  explicit ServeModel(ServeBundle bundle) : b_(std::move(bundle)) {
    b_.validate();
    entries_.emplace("off", Entry{&b_.off, Network(b_.off.spec), FeaturePrivatizer(FeatureDpSpec{}, dims()),
                                  std::nullopt});
    for (const auto& [name, lvl] : b_.levels)
      entries_.emplace(name, Entry{&lvl.model, Network(lvl.model.spec),
                                   FeaturePrivatizer(lvl.feature_dp, dims()), lvl.feature_dp.epsilon()});
  }

  ServeModel(const ServeModel&) = delete;
  ServeModel& operator=(const ServeModel&) = delete;

  const ServeBundle& bundle() const { return b_; }
  std::size_t dims() const { return b_.feature_names.size(); }
  bool has_mode(const std::string& mode) const { return entries_.count(mode) == 1; }

  std::optional<double> epsilon(const std::string& mode) const { return entry(mode).epsilon; }

  ServePrediction predict(std::span<const double> features, const std::string& mode, Rng& rng) const {
    const Entry& e = entry(mode);
    require(features.size() == dims(), ErrorKind::kDimension,
            "expected " + std::to_string(dims()) + " features, got " + std::to_string(features.size()));
    const auto start = std::chrono::steady_clock::now();
    std::vector<double> x(features.begin(), features.end());
    e.privatizer.apply(x, rng);
    std::vector<double> logits(b_.class_names.size());
    e.net.logits_one(e.model->params, x, 1, logits);
    const double elapsed =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    ServePrediction p;
    p.cls = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    p.label = b_.class_names[static_cast<std::size_t>(p.cls)];
    const double mx = logits[static_cast<std::size_t>(p.cls)];
    double z = 0.0;
    for (double& v : logits) z += (v = std::exp(v - mx));
    for (double& v : logits) v /= z;
    p.proba = std::move(logits);
    p.epsilon = e.epsilon;
    p.latency_ms = elapsed;
    return p;
  }

  nlohmann::json info() const {
    nlohmann::json epsilon = nlohmann::json::object(), models = nlohmann::json::object(),
                   feature_dp = nlohmann::json::object();
    for (const auto& mode : serve_modes()) {
      const Entry& e = entry(mode);
      epsilon[mode] = e.epsilon ? nlohmann::json(*e.epsilon) : nlohmann::json(nullptr);
      nlohmann::json m{{"spec", e.model->spec.to_json()}, {"privacy_spent", nullptr}};
      if (e.model->meta.privacy_spent)
        m["privacy_spent"] = {{"epsilon", e.model->meta.privacy_spent->epsilon},
                              {"delta", e.model->meta.privacy_spent->delta}};
      models[mode] = m;
      feature_dp[mode] = e.privatizer.audit();
    }
    std::vector<std::string> selected_names;
    for (int j : b_.selected) selected_names.push_back(b_.feature_names[static_cast<std::size_t>(j)]);
    return {{"feature_names", b_.feature_names},
            {"class_names", b_.class_names},
            {"modes", serve_modes()},
            {"levels", private_levels()},
            {"epsilon", epsilon},
            {"selected_features", b_.selected},
            {"selected_feature_names", selected_names},
            {"models", models},
            {"feature_dp", feature_dp},
            {"stream", {{"fps", b_.fps}, {"frames", b_.replay.size()}}}};
  }

 private:
  struct Entry {
    const TrainedModel* model;
    Network net;
    FeaturePrivatizer privatizer;
    std::optional<double> epsilon;
  };

  const Entry& entry(const std::string& mode) const {
    auto it = entries_.find(mode);
    if (it == entries_.end()) fail(ErrorKind::kInvalidArgument, "unknown mode \"" + mode + "\"");
    return it->second;
  }

  ServeBundle b_;
  std::map<std::string, Entry> entries_;
};

inline nlohmann::json prediction_json(const ServePrediction& p) {
  return {{"class", p.cls},
          {"label", p.label},
          {"proba", p.proba},
          {"epsilon", p.epsilon ? nlohmann::json(*p.epsilon) : nlohmann::json(nullptr)},
          {"latency_ms", p.latency_ms}};
}

// ---------------------------------------------------------------------------
// HTTP

namespace beast = boost::beast;
namespace http = boost::beast::http;
namespace websocket = boost::beast::websocket;
namespace net = boost::asio;
using tcp = boost::asio::ip::tcp;

using HttpRequest = http::request<http::string_body>;
using HttpResponse = http::response<http::string_body>;

namespace detail {

inline HttpResponse json_response(const HttpRequest& req, http::status status, const nlohmann::json& body) {
  HttpResponse res{status, req.version()};
  res.set(http::field::server, "privatexr");
  res.set(http::field::content_type, "application/json");
  res.set(http::field::access_control_allow_origin, "*");
  res.keep_alive(req.keep_alive());
  res.body() = body.dump();
  res.prepare_payload();
  return res;
}

inline nlohmann::json field_error(const std::string& field, const std::string& message) {
  return {{"error", message}, {"field", field}};
}

}  // namespace detail

// Pure request handler. `counter` numbers noisy requests so each gets its own
// noise stream.
inline HttpResponse handle_http(const ServeModel& model, const HttpRequest& req,
                                std::atomic<std::uint64_t>& counter) {
  using detail::field_error;
  using detail::json_response;
  const std::string target(req.target());
  if (target == "/health") {
    if (req.method() != http::verb::get) return json_response(req, http::status::method_not_allowed, {{"error", "use GET"}});
    return json_response(req, http::status::ok, {{"status", "ok"}});
  }
  if (target == "/model/info") {
    if (req.method() != http::verb::get) return json_response(req, http::status::method_not_allowed, {{"error", "use GET"}});
    return json_response(req, http::status::ok, model.info());
  }
  if (target == "/predict") {
    if (req.method() != http::verb::post) return json_response(req, http::status::method_not_allowed, {{"error", "use POST"}});
    const auto body = nlohmann::json::parse(req.body(), nullptr, false);
    if (body.is_discarded() || !body.is_object())
      return json_response(req, http::status::bad_request, field_error("body", "body must be a JSON object"));
    if (!body.contains("features"))
      return json_response(req, http::status::bad_request, field_error("features", "missing field"));
    const auto& feats = body["features"];
    if (!feats.is_array())
      return json_response(req, http::status::bad_request, field_error("features", "must be an array of numbers"));
    std::vector<double> x;
    for (const auto& v : feats) {
      if (!v.is_number())
        return json_response(req, http::status::bad_request, field_error("features", "must be an array of numbers"));
      x.push_back(v.get<double>());
    }
    if (x.size() != model.dims())
      return json_response(req, http::status::bad_request,
                           field_error("features", "expected " + std::to_string(model.dims()) + " values, got " +
                                                       std::to_string(x.size())));
    std::string mode = "off";
    if (body.contains("mode")) {
      if (!body["mode"].is_string())
        return json_response(req, http::status::bad_request, field_error("mode", "must be a string"));
      mode = body["mode"].get<std::string>();
    }
    if (!model.has_mode(mode))
      return json_response(req, http::status::bad_request, field_error("mode", "unknown mode \"" + mode + "\""));
    Rng rng = make_rng(derive_seed(derive_seed(model.bundle().seed, "predict"), counter.fetch_add(1)));
    nlohmann::json out = prediction_json(model.predict(x, mode, rng));
    out["mode"] = mode;
    return json_response(req, http::status::ok, out);
  }
  return json_response(req, http::status::not_found, {{"error", "no route " + target}});
}

// ---------------------------------------------------------------------------
// Sessions

namespace detail {

// Replays the bundle's dataset at the configured rate. Every handler runs on
// the connection's strand, so the outgoing queue keeps a mode_ack ahead of
// any prediction made under the new mode.
class StreamSession : public std::enable_shared_from_this<StreamSession> {
 public:
  StreamSession(tcp::socket&& socket, std::shared_ptr<const ServeModel> model, std::uint64_t session)
      : ws_(std::move(socket)),
        timer_(ws_.get_executor()),
        model_(std::move(model)),
        rng_(make_rng(derive_seed(derive_seed(model_->bundle().seed, "stream"), session))) {}

  void run(HttpRequest req) {
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.async_accept(req, [self = shared_from_this()](beast::error_code ec) {
      if (ec) return;
      self->do_read();
      self->next_ = std::chrono::steady_clock::now();
      self->schedule();
    });
  }

 private:
  static constexpr std::size_t kMaxQueued = 1024;

  void schedule() {
    const auto period = std::chrono::duration_cast<std::chrono::steady_clock::duration>(
        std::chrono::duration<double>(1.0 / model_->bundle().fps));
    next_ += period;
    timer_.expires_at(next_);
    timer_.async_wait([self = shared_from_this()](beast::error_code ec) {
      if (ec || self->closed_) return;
      self->emit_prediction();
      self->schedule();
    });
  }

  void emit_prediction() {
    const auto& frames = model_->bundle().replay.frames;
    const std::size_t index = static_cast<std::size_t>(t_ % frames.size());
    const auto p = model_->predict(frames[index].features, mode_, rng_);
    nlohmann::json msg{{"type", "prediction"}, {"t", t_},          {"frame", index},
                       {"class", p.cls},       {"label", p.label}, {"mode", mode_},
                       {"epsilon", p.epsilon ? nlohmann::json(*p.epsilon) : nlohmann::json(nullptr)},
                       {"latency_ms", p.latency_ms}};
    ++t_;
    // A reader that stops draining loses frames rather than growing memory.
    if (queue_.size() < kMaxQueued) send(msg.dump());
  }

  void do_read() {
    ws_.async_read(buffer_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) return self->close();
      self->on_message(beast::buffers_to_string(self->buffer_.data()));
      self->buffer_.consume(self->buffer_.size());
      self->do_read();
    });
  }

  void on_message(const std::string& text) {
    const auto msg = nlohmann::json::parse(text, nullptr, false);
    auto error = [&](const std::string& field, const std::string& message) {
      send(nlohmann::json{{"type", "error"}, {"field", field}, {"error", message}}.dump());
    };
    if (msg.is_discarded() || !msg.is_object()) return error("body", "message must be a JSON object");
    if (!msg.contains("type") || !msg["type"].is_string()) return error("type", "missing message type");
    if (msg["type"] != "set_mode") return error("type", "unknown message type");
    if (!msg.contains("mode") || !msg["mode"].is_string()) return error("mode", "missing mode");
    const std::string mode = msg["mode"].get<std::string>();
    if (!model_->has_mode(mode)) return error("mode", "unknown mode \"" + mode + "\"");
    mode_ = mode;
    send(nlohmann::json{{"type", "mode_ack"}, {"mode", mode_}}.dump());
  }

  void send(std::string text) {
    queue_.push_back(std::move(text));
    if (queue_.size() == 1) do_write();
  }

  void do_write() {
    ws_.text(true);
    ws_.async_write(net::buffer(queue_.front()), [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) return self->close();
      self->queue_.pop_front();
      if (!self->queue_.empty()) self->do_write();
    });
  }

  void close() {
    closed_ = true;
    timer_.cancel();
  }

  websocket::stream<beast::tcp_stream> ws_;
  net::steady_timer timer_;
  std::shared_ptr<const ServeModel> model_;
  Rng rng_;
  beast::flat_buffer buffer_;
  std::deque<std::string> queue_;
  std::string mode_ = "off";
  std::uint64_t t_ = 0;
  std::chrono::steady_clock::time_point next_;
  bool closed_ = false;
};

struct ServerState {
  std::shared_ptr<const ServeModel> model;
  std::atomic<std::uint64_t> requests{0};
  std::atomic<std::uint64_t> sessions{0};
};

class HttpSession : public std::enable_shared_from_this<HttpSession> {
 public:
  HttpSession(tcp::socket&& socket, std::shared_ptr<ServerState> state)
      : stream_(std::move(socket)), state_(std::move(state)) {}

  void run() {
    net::dispatch(stream_.get_executor(), [self = shared_from_this()] { self->do_read(); });
  }

 private:
  void do_read() {
    req_ = {};
    stream_.expires_after(std::chrono::seconds(30));
    http::async_read(stream_, buffer_, req_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      self->on_read(ec);
    });
  }

  void on_read(beast::error_code ec) {
    if (ec == http::error::end_of_stream) return do_close();
    if (ec) return;
    if (websocket::is_upgrade(req_)) {
      if (req_.target() == "/stream") {
        stream_.expires_never();
        std::make_shared<StreamSession>(stream_.release_socket(), state_->model, state_->sessions.fetch_add(1))
            ->run(std::move(req_));
        return;
      }
      return send(json_response(req_, http::status::not_found, {{"error", "no stream at this path"}}));
    }
    send(handle_http(*state_->model, req_, state_->requests));
  }

  void send(HttpResponse res) {
    res_ = std::make_shared<HttpResponse>(std::move(res));
    http::async_write(stream_, *res_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) return;
      if (!self->res_->keep_alive()) return self->do_close();
      self->do_read();
    });
  }

  void do_close() {
    beast::error_code ec;
    stream_.socket().shutdown(tcp::socket::shutdown_send, ec);
  }

  beast::tcp_stream stream_;
  beast::flat_buffer buffer_;
  std::shared_ptr<ServerState> state_;
  HttpRequest req_;
  std::shared_ptr<HttpResponse> res_;
};

}  // namespace detail

// Binds on construction; port 0 picks a free port.
class Server {
 public:
  Server(std::shared_ptr<const ServeModel> model, const std::string& address, unsigned short port,
         int threads = 2)
      : state_(std::make_shared<detail::ServerState>()), acceptor_(ioc_), threads_(std::max(1, threads)) {
    state_->model = std::move(model);
    beast::error_code ec;
    const auto ip = net::ip::make_address(address, ec);
    if (ec) fail(ErrorKind::kConfig, "bad bind address \"" + address + "\"");
    const tcp::endpoint endpoint{ip, port};
    acceptor_.open(endpoint.protocol(), ec);
    if (!ec) acceptor_.set_option(net::socket_base::reuse_address(true), ec);
    if (!ec) acceptor_.bind(endpoint, ec);
    if (!ec) acceptor_.listen(net::socket_base::max_listen_connections, ec);
    if (ec) fail(ErrorKind::kRuntime, "cannot listen on " + address + ":" + std::to_string(port) + ": " + ec.message());
  }

  ~Server() { stop(); }
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  unsigned short port() const { return acceptor_.local_endpoint().port(); }

  // Returns immediately; the service runs on its own threads until stop().
  void start() {
    do_accept();
    for (int i = 0; i < threads_; ++i) pool_.emplace_back([this] { ioc_.run(); });
  }

  // Blocks the calling thread as one of the workers.
  void run() {
    start();
    for (auto& t : pool_) t.join();
    pool_.clear();
  }

  void stop() {
    ioc_.stop();
    for (auto& t : pool_)
      if (t.joinable()) t.join();
    pool_.clear();
  }

 private:
  void do_accept() {
    acceptor_.async_accept(net::make_strand(ioc_), [this](beast::error_code ec, tcp::socket socket) {
      if (!ec) std::make_shared<detail::HttpSession>(std::move(socket), state_)->run();
      if (acceptor_.is_open()) do_accept();
    });
  }

  std::shared_ptr<detail::ServerState> state_;
  net::io_context ioc_;
  tcp::acceptor acceptor_;
  int threads_;
  std::vector<std::thread> pool_;
};

}  // namespace privatexr
