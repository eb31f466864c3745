#pragma once

// The four-step run: distribute blocks, exchange conditional scores, collect
// candidate designs, evaluate every candidate on every block and select.
// The coordinator owns all run state; designers only see messages.

#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "distdesign/channel.hpp"
#include "distdesign/pipeline.hpp"
#include "distdesign/protocol.hpp"

namespace distdesign {

enum class Transport { in_process, multi_process };

inline std::string to_string(Transport t) { return t == Transport::multi_process ? "multi-process" : "in-process"; }

inline Transport transport_from_string(const std::string& s) {
  if (s == "in-process") return Transport::in_process;
  if (s == "multi-process") return Transport::multi_process;
  throw UsageError("unknown transport '" + s + "'");
}

struct TransferLedger {
  std::uint64_t covariate_values = 0;  // step 1, block contents
  std::uint64_t score_values = 0;      // step 2, conditional scores delivered to designers
  std::uint64_t score_values_uploaded = 0;
  std::uint64_t design_entries = 0;          // step 3, candidate uploads
  std::uint64_t design_entries_relayed = 0;  // step 4, candidates sent out for evaluation
  std::uint64_t balance_entries = 0;         // step 4, per-covariate values returned
  std::map<std::string, double> step_seconds;
};

struct LedgerCheck {
  bool pass = true;
  std::vector<std::string> failures;
};

// Exact counts for a completed run over p assigned covariates.
inline LedgerCheck ledger_check(const TransferLedger& l, std::size_t n, int m, std::size_t p, std::size_t k_methods) {
  LedgerCheck c;
  const auto mm = static_cast<std::uint64_t>(m);
  auto expect = [&](const char* what, std::uint64_t got, std::uint64_t want) {
    if (got == want) return;
    c.pass = false;
    c.failures.push_back(std::string(what) + ": " + std::to_string(got) + " sent, expected " + std::to_string(want));
  };
  expect("score values", l.score_values, mm * (mm - 1) * n);
  expect("design entries", l.design_entries, mm * k_methods * n);
  expect("balance entries", l.balance_entries, p * mm * k_methods);
  return c;
}

struct OrchestratorConfig {
  DesignerConfig designer;
  Criterion criterion = Criterion::d_max;
  Transport transport = Transport::in_process;
  // Multi-process: spawn `<worker_executable> worker --stdio ...` per designer,
  // or, when listen_address is set, wait for workers to connect over TCP.
  std::string worker_executable;
  std::string listen_address;
  std::function<void(int port)> on_listening;
  Millis step_timeout{std::chrono::hours(6)};
  // Receives every message the coordinator sends or receives, as NDJSON.
  std::function<void(const std::string&)> transcript;
  // In-process only: sees each designer's final scores (diagnostics when the
  // truth is known). Called from worker threads.
  std::function<void(int designer_id, const ScoreVector&)> final_score_tap;
};

struct RunResult {
  SelectionResult selection;
  std::vector<DesignVector> designs;  // ordered by DesignRef
  TransferLedger ledger;
};

inline const char* step_name(int step) {
  switch (step) {
    case 1: return "distribute blocks";
    case 2: return "conditional scores";
    case 3: return "candidate designs";
    case 4: return "balance evaluation";
    default: return "shutdown";
  }
}

// Designer side of a session. Returns after SHUTDOWN.
inline void serve_designer(Channel& ch, int designer_id, Millis timeout,
                           const std::function<void(int, const ScoreVector&)>& final_score_tap = {}) {
  auto send = [&](Payload p) { ch.send(Message{kProtocolVersion, designer_id, kCoordinator, std::move(p)}); };
  // Next message of the wanted type; nullopt on SHUTDOWN.
  auto next = [&](MsgType want) -> std::optional<Message> {
    Message m = ch.receive(timeout);
    if (m.type() == MsgType::shutdown) return std::nullopt;
    if (m.type() != want)
      throw ProtocolError("designer " + std::to_string(designer_id) + " expected " + to_string(want) + ", got " +
                          to_string(m.type()));
    if (m.recipient != designer_id)
      throw ProtocolError("designer " + std::to_string(designer_id) + " received a message for " +
                          detail::participant(m.recipient));
    return m;
  };

  send(Hello{"worker"});
  const auto assign = next(MsgType::assign_block);
  if (!assign) return;
  const auto& a = std::get<AssignBlock>(assign->payload);
  if (a.designer_id != designer_id)
    throw ProtocolError("designer " + std::to_string(designer_id) + " was assigned block " +
                        std::to_string(a.designer_id));
  const DesignerConfig cfg = a.config;
  validate_designer_config(cfg);
  const CovariateBlock block = block_from_message(a);
  const Treatment& w = block.treatment;

  const ScoreVector cond = estimate_conditional_scores(block, w, cfg.propensity);
  send(ConditionalScores{designer_id, cond.model, std::vector<double>(cond.values.begin(), cond.values.end())});

  const auto bc = next(MsgType::scores_broadcast);
  if (!bc) return;
  std::vector<ScoreVector> shared;
  for (const auto& s : std::get<ScoresBroadcast>(bc->payload).scores) {
    ScoreVector v;
    v.values = Eigen::Map<const Eigen::VectorXd>(s.values.data(), static_cast<Eigen::Index>(s.values.size()));
    v.designer_id = s.designer_id;
    v.model = s.model;
    v.stage = ScoreStage::conditional;
    shared.push_back(std::move(v));
  }
  if (static_cast<int>(shared.size()) != a.m_designers - 1)
    throw ProtocolError("designer " + std::to_string(designer_id) + " received " + std::to_string(shared.size()) +
                        " shared score vectors, expected " + std::to_string(a.m_designers - 1));
  const ScoreVector fin = estimate_final_scores(block, shared, w, cfg.propensity);
  if (final_score_tap) final_score_tap(designer_id, fin);
  for (auto& d : build_designs(fin, w, cfg, ScoreSource::designer, designer_id)) send(CandidateDesign{std::move(d)});

  const auto req = next(MsgType::eval_request);
  if (!req) return;
  for (const auto& d : std::get<EvalRequest>(req->payload).designs) {
    validate_design(d, w);
    auto pb = evaluate_design_block(d, block, {}, cfg.balance);
    pb.block_id = designer_id;
    send(EvalReport{std::move(pb)});
  }

  while (true) {
    const Message m = ch.receive(timeout);
    if (m.type() == MsgType::shutdown) return;
    if (m.type() != MsgType::selection) throw ProtocolError("designer expected SELECTION or SHUTDOWN, got " + to_string(m.type()));
  }
}

namespace detail {

// One connected designer, whatever the transport.
struct Endpoint {
  int designer_id = 0;
  Channel* channel = nullptr;
  // in-process
  std::unique_ptr<Channel> coordinator_end;
  std::thread thread;
  std::shared_ptr<std::exception_ptr> failure;
  // spawned process
  std::unique_ptr<WorkerProcess> process;
  // TCP
  std::unique_ptr<Channel> socket;
  std::optional<Message> pending_hello;
};

class Coordinator {
 public:
  Coordinator(const Dataset& data, const PartitionSpec& partition, const OrchestratorConfig& cfg)
      : data_(data), partition_(partition), cfg_(cfg), m_(partition.m_designers) {}

  ~Coordinator() { teardown(); }

  RunResult run() {
    connect();
    const auto n = data_.n_subjects();
    const auto k = cfg_.designer.methods.size();
    RunResult out;
    auto& ledger = out.ledger;

    timed(ledger, 1, [&] {
      for (auto& e : endpoints_) {
        const Message hello = e.pending_hello ? *e.pending_hello : receive(e, 1);
        expect(hello, MsgType::hello, e, 1);
        const auto& cols = partition_.blocks[static_cast<std::size_t>(e.designer_id - 1)];
        const auto block = extract_block(data_, e.designer_id, cols);
        std::vector<std::string> names;
        for (int c : cols) names.push_back(data_.meta()[static_cast<std::size_t>(c)].name);
        send(e, assign_block_message(block, names, m_, cfg_.designer), 1);
        ledger.covariate_values += static_cast<std::uint64_t>(block.matrix.size());
      }
    });

    std::vector<ConditionalScores> scores;
    timed(ledger, 2, [&] {
      for (auto& e : endpoints_) {
        const Message msg = receive(e, 2);
        expect(msg, MsgType::conditional_scores, e, 2);
        auto s = std::get<ConditionalScores>(msg.payload);
        if (s.designer_id != e.designer_id || s.values.size() != n)
          fail(e, 2, "conditional scores do not belong to this designer or have the wrong length");
        ledger.score_values_uploaded += s.values.size();
        scores.push_back(std::move(s));
      }
      // Barrier passed: relay everyone else's scores.
      for (auto& e : endpoints_) {
        ScoresBroadcast b;
        for (const auto& s : scores)
          if (s.designer_id != e.designer_id) b.scores.push_back(s);
        for (const auto& s : b.scores) ledger.score_values += s.values.size();
        send(e, std::move(b), 2);
      }
    });

    timed(ledger, 3, [&] {
      for (auto& e : endpoints_) {
        for (std::size_t j = 0; j < k; ++j) {
          const Message msg = receive(e, 3);
          expect(msg, MsgType::candidate_design, e, 3);
          auto d = std::get<CandidateDesign>(msg.payload).design;
          if (d.ref != DesignRef{ScoreSource::designer, e.designer_id, cfg_.designer.methods[j]})
            fail(e, 3, "sent design " + d.ref.label() + " out of turn");
          try {
            validate_design(d, data_.treatment());
          } catch (const Error& err) {
            fail(e, 3, err.what());
          }
          ledger.design_entries += d.assignments.size();
          out.designs.push_back(std::move(d));
        }
      }
      std::sort(out.designs.begin(), out.designs.end(), [](const auto& a, const auto& b) { return a.ref < b.ref; });
    });

    std::vector<PartialBalance> partials;
    timed(ledger, 4, [&] {
      for (auto& e : endpoints_) {
        send(e, EvalRequest{out.designs}, 4);
        ledger.design_entries_relayed += out.designs.size() * n;
      }
      for (auto& e : endpoints_) {
        for (std::size_t j = 0; j < out.designs.size(); ++j) {
          const Message msg = receive(e, 4);
          expect(msg, MsgType::eval_report, e, 4);
          auto pb = std::get<EvalReport>(msg.payload).partial;
          if (pb.block_id != e.designer_id || pb.design != out.designs[j].ref)
            fail(e, 4, "balance report for " + pb.design.label() + " arrived out of turn");
          ledger.balance_entries += pb.d.size();
          partials.push_back(std::move(pb));
        }
      }
      out.selection = aggregate_and_select(partials, partition_, cfg_.criterion, cfg_.designer.balance.threshold);
    });

    const Selection sel = selection_message(out.selection);
    for (auto& e : endpoints_) send(e, sel, 5);
    for (auto& e : endpoints_) send(e, Shutdown{"done"}, 5);
    finish();
    return out;
  }

 private:
  template <class F>
  void timed(TransferLedger& l, int step, F&& f) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    l.step_seconds[std::string("step") + std::to_string(step)] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  void record(const Message& m) {
    if (cfg_.transcript) cfg_.transcript(encode_message(m));
  }

  void send(Endpoint& e, Payload p, int step) {
    Message m{kProtocolVersion, kCoordinator, e.designer_id, std::move(p)};
    record(m);
    try {
      e.channel->send(m);
    } catch (const ProtocolError& err) {
      fail(e, step, err.what());
    }
  }

  Message receive(Endpoint& e, int step) {
    try {
      Message m = e.channel->receive(cfg_.step_timeout);
      record(m);
      if (m.sender != e.designer_id) fail(e, step, "message claims to come from " + participant(m.sender));
      return m;
    } catch (const ProtocolError& err) {
      fail(e, step, err.what());
    }
  }

  void expect(const Message& m, MsgType want, Endpoint& e, int step) {
    if (m.type() != want) fail(e, step, "expected " + to_string(want) + ", got " + to_string(m.type()));
  }

  [[noreturn]] void fail(Endpoint& e, int step, const std::string& why) {
    const int id = e.designer_id;
    std::string detail_text = why;
    ErrorKind kind = ErrorKind::protocol;
    teardown();
    if (e.failure && *e.failure) {
      try {
        std::rethrow_exception(*e.failure);
      } catch (const Error& err) {
        detail_text = err.what();
        kind = err.kind();
      } catch (const std::exception& err) {
        detail_text = err.what();
      }
    } else if (e.process) {
      const int status = e.process->wait(Millis(2000));
      detail_text += " (worker exit status " + std::to_string(status) + ")";
      if (status >= 1 && status <= 3) kind = static_cast<ErrorKind>(status);
    }
    throw Error(kind, "designer " + std::to_string(id) + " failed during step " + std::to_string(std::min(step, 4)) +
                          " (" + step_name(step) + "): " + detail_text);
  }

  void connect() {
    validate_partition(partition_, data_.n_covariates());
    validate_designer_config(cfg_.designer);
    endpoints_.resize(static_cast<std::size_t>(m_));
    for (int i = 0; i < m_; ++i) endpoints_[static_cast<std::size_t>(i)].designer_id = i + 1;

    if (cfg_.transport == Transport::in_process) {
      for (auto& e : endpoints_) {
        auto [coord, worker] = make_queue_pair();
        e.coordinator_end = std::move(coord);
        e.channel = e.coordinator_end.get();
        e.failure = std::make_shared<std::exception_ptr>();
        e.thread = std::thread([w = std::move(worker), id = e.designer_id, failure = e.failure,
                                timeout = cfg_.step_timeout, tap = cfg_.final_score_tap]() mutable {
          try {
            serve_designer(*w, id, timeout, tap);
          } catch (...) {
            *failure = std::current_exception();
          }
          w->close();
        });
      }
      return;
    }

    if (!cfg_.listen_address.empty()) {
      TcpListener listener(parse_host_port(cfg_.listen_address));
      if (cfg_.on_listening) cfg_.on_listening(listener.port());
      for (int i = 0; i < m_; ++i) {
        auto sock = listener.accept(cfg_.step_timeout);
        Message hello = sock->receive(cfg_.step_timeout);
        if (hello.type() != MsgType::hello) throw ProtocolError("connecting worker did not say HELLO");
        const int id = hello.sender;
        if (id < 1 || id > m_) throw ProtocolError("worker announced designer id " + std::to_string(id) + " outside 1.." + std::to_string(m_));
        auto& e = endpoints_[static_cast<std::size_t>(id - 1)];
        if (e.socket) throw ProtocolError("two workers announced designer id " + std::to_string(id));
        record(hello);
        e.pending_hello = std::move(hello);
        e.socket = std::move(sock);
        e.channel = e.socket.get();
      }
      return;
    }

    if (cfg_.worker_executable.empty())
      throw UsageError("multi-process transport needs a worker executable or a listen address");
    for (auto& e : endpoints_) {
      e.process = std::make_unique<WorkerProcess>(
          cfg_.worker_executable,
          std::vector<std::string>{"worker", "--stdio", "--designer-id", std::to_string(e.designer_id), "--timeout-ms",
                                   std::to_string(cfg_.step_timeout.count())});
      e.channel = &e.process->channel();
    }
  }

  // Clean end: workers have been told to shut down.
  void finish() {
    for (auto& e : endpoints_) {
      if (e.thread.joinable()) e.thread.join();
      if (e.failure && *e.failure) std::rethrow_exception(*e.failure);
      if (e.process) {
        const int status = e.process->wait(Millis(30'000));
        if (status != 0)
          throw ProtocolError("designer " + std::to_string(e.designer_id) + " worker exited with status " +
                              std::to_string(status));
      }
    }
    endpoints_.clear();
  }

  // Abort path: close everything so blocked workers return.
  void teardown() {
    for (auto& e : endpoints_) {
      if (e.channel) {
        try {
          e.channel->send(Message{kProtocolVersion, kCoordinator, e.designer_id, Shutdown{"abort"}});
        } catch (const Error&) {
        }
        e.channel->close();
      }
    }
    for (auto& e : endpoints_)
      if (e.thread.joinable()) e.thread.join();
  }

  const Dataset& data_;
  const PartitionSpec& partition_;
  const OrchestratorConfig& cfg_;
  int m_;
  std::vector<Endpoint> endpoints_;
};

}  // namespace detail

inline RunResult run_distributed(const Dataset& data, const PartitionSpec& partition, const OrchestratorConfig& cfg) {
  detail::Coordinator c(data, partition, cfg);
  return c.run();
}

struct TranscriptCheck {
  std::vector<std::string> violations;
  bool ok() const { return violations.empty(); }
};

// Replays a coordinator transcript: schema, isolation (each designer saw only
// its own columns), the score barrier and step order.
inline TranscriptCheck check_transcript(const std::vector<std::string>& lines, const PartitionSpec& partition,
                                        std::size_t k_methods) {
  TranscriptCheck out;
  const int m = partition.m_designers;
  auto bad = [&](std::size_t at, const std::string& why) {
    out.violations.push_back("line " + std::to_string(at + 1) + ": " + why);
  };
  std::vector<Message> msgs;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    try {
      msgs.push_back(decode_message(lines[i]));
    } catch (const ProtocolError& e) {
      bad(i, e.what());
      return out;
    }
  }
  auto index = [](int id) { return static_cast<std::size_t>(id - 1); };
  std::vector<int> assigned(static_cast<std::size_t>(m), 0), broadcasts(static_cast<std::size_t>(m), 0),
      candidates(static_cast<std::size_t>(m), 0), requests(static_cast<std::size_t>(m), 0),
      reports(static_cast<std::size_t>(m), 0), shutdowns(static_cast<std::size_t>(m), 0);
  int scores_in = 0, total_candidates = 0, total_reports = 0;
  const auto total_designs = static_cast<int>(k_methods) * m;

  for (std::size_t i = 0; i < msgs.size(); ++i) {
    const auto& msg = msgs[i];
    const int peer = msg.sender == kCoordinator ? msg.recipient : msg.sender;
    if (peer < 1 || peer > m) {
      bad(i, "designer id " + std::to_string(peer) + " outside 1.." + std::to_string(m));
      continue;
    }
    if (shutdowns[index(peer)]) bad(i, "message after SHUTDOWN to designer " + std::to_string(peer));
    switch (msg.type()) {
      case MsgType::assign_block: {
        const auto& a = std::get<AssignBlock>(msg.payload);
        if (a.designer_id != peer) bad(i, "block for designer " + std::to_string(a.designer_id) + " sent to " + std::to_string(peer));
        if (a.columns != partition.blocks[index(peer)])
          bad(i, "designer " + std::to_string(peer) + " received columns outside its block");
        if (assigned[index(peer)]++) bad(i, "designer " + std::to_string(peer) + " assigned twice");
        break;
      }
      case MsgType::conditional_scores:
        if (!assigned[index(peer)]) bad(i, "scores before block assignment");
        ++scores_in;
        break;
      case MsgType::scores_broadcast: {
        if (scores_in != m) bad(i, "scores relayed to designer " + std::to_string(peer) + " before all " + std::to_string(m) + " arrived");
        const auto& b = std::get<ScoresBroadcast>(msg.payload);
        std::vector<int> ids;
        for (const auto& s : b.scores) ids.push_back(s.designer_id);
        std::vector<int> want;
        for (int d = 1; d <= m; ++d)
          if (d != peer) want.push_back(d);
        if (ids != want) bad(i, "designer " + std::to_string(peer) + " did not receive exactly the other designers' scores");
        ++broadcasts[index(peer)];
        break;
      }
      case MsgType::candidate_design:
        if (!broadcasts[index(peer)]) bad(i, "designer " + std::to_string(peer) + " sent a design before receiving shared scores");
        ++candidates[index(peer)];
        ++total_candidates;
        break;
      case MsgType::eval_request:
        if (total_candidates != total_designs) bad(i, "evaluation requested before every candidate arrived");
        ++requests[index(peer)];
        break;
      case MsgType::eval_report:
        if (!requests[index(peer)]) bad(i, "balance report before evaluation request");
        ++reports[index(peer)];
        ++total_reports;
        break;
      case MsgType::selection:
        if (total_reports != total_designs * m) bad(i, "selection announced before every report arrived");
        break;
      case MsgType::shutdown:
        ++shutdowns[index(peer)];
        break;
      case MsgType::hello:
        break;
    }
  }
  for (int d = 1; d <= m; ++d) {
    const auto i = index(d);
    if (candidates[i] != static_cast<int>(k_methods))
      out.violations.push_back("designer " + std::to_string(d) + " sent " + std::to_string(candidates[i]) + " candidates");
    if (reports[i] != total_designs)
      out.violations.push_back("designer " + std::to_string(d) + " sent " + std::to_string(reports[i]) + " balance reports");
    if (!shutdowns[i]) out.violations.push_back("designer " + std::to_string(d) + " never shut down");
  }
  return out;
}

}  // namespace distdesign
