/*
 * Copyright 2026 The kreqtrace Authors.
 *
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
 *
 * SPDX-License-Identifier: Apache-2.0
 */

// kreqtrace: rebuild per-request span DAGs from kernel trace logs.
//
//   kreqtrace reconstruct --gateway 10.0.0.10:8080 --out out/ cpu0.txt cpu1.txt
//   kreqtrace synth --topology topo.json --requests 20 --out synth/
//   kreqtrace diff --truth synth/ground_truth.json --dags out/
//   kreqtrace render --dag out/traces/trace-000001.json --width 100

#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "kreqtrace/pipeline.hpp"

namespace {

using kreqtrace::RunConfig;

// Raw flag values; applied on top of the config file afterwards.
struct Flags {
  std::string config;
  std::vector<std::string> inputs;
  std::string backend, gateway, pids, user_events, out, topology, fault, truth, dags, dag;
  bool follow_forks = false, strict = false, merged = false;
  std::size_t width = 0, requests = 0, cpus = 0;
  std::uint64_t seed = 0, fault_at = 0;
  double fault_p = 0.0;
};

struct Registered {
  CLI::App* app = nullptr;
  std::map<std::string, CLI::Option*> opts;
  bool given(const std::string& name) const {
    auto it = opts.find(name);
    return it != opts.end() && it->second->count() > 0;
  }
};

Registered add_common(CLI::App* sub, Flags& f) {
  Registered r{sub, {}};
  r.opts["config"] = sub->add_option("--config", f.config, "JSON config file; flags override it");
  r.opts["backend"] = sub->add_option("--backend", f.backend, "ftrace or bpftrace");
  r.opts["seed"] = sub->add_option("--seed", f.seed, "random seed");
  r.opts["out"] = sub->add_option("--out", f.out, "output directory");
  return r;
}

void apply_flags(const Registered& r, const Flags& f, RunConfig& c) {
  if (r.given("backend")) c.ingest.backend = kreqtrace::backend_from(f.backend);
  if (r.given("gateway")) c.ingest.gateway_endpoints = kreqtrace::parse_gateways(f.gateway);
  if (r.given("pids")) c.ingest.pid_allowlist = kreqtrace::parse_pids(f.pids);
  if (r.given("follow-forks")) c.ingest.follow_forks = f.follow_forks;
  if (r.given("user-events")) c.user_events = kreqtrace::split_list(f.user_events);
  if (r.given("strict")) c.strict = f.strict;
  if (r.given("merged")) c.merged = f.merged;
  if (r.given("out")) c.out_dir = f.out;
  if (r.given("width")) c.width = f.width;
  if (r.given("seed")) c.seed = f.seed;
  if (r.given("inputs")) c.inputs.assign(f.inputs.begin(), f.inputs.end());
  if (r.given("topology")) c.topology = f.topology;
  if (r.given("requests")) c.requests = f.requests;
  if (r.given("cpus")) c.cpus = f.cpus;
  if (r.given("fault")) {
    auto kind = kreqtrace::parse_fault_kind(f.fault);
    if (!kind) throw kreqtrace::ConfigError("unknown fault mode '" + f.fault + "'");
    c.fault.kind = *kind;
  }
  if (r.given("fault-p")) c.fault.probability = f.fault_p;
  if (r.given("fault-at")) {
    c.fault.at_ns = f.fault_at;
    c.fault_at_set = true;
  }
  if (r.given("truth")) c.truth = f.truth;
  if (r.given("dags")) c.dags = f.dags;
  if (r.given("dag")) c.dag = f.dag;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rebuild per-request span DAGs from kernel trace logs"};
  app.require_subcommand(1);
  Flags f;
  std::vector<Registered> subs;

  {
    auto r = add_common(app.add_subcommand("reconstruct", "trace logs to DAGs"), f);
    r.opts["gateway"] = r.app->add_option("--gateway", f.gateway, "ip:port[,...] client entry points");
    r.opts["pids"] = r.app->add_option("--pids", f.pids, "thread id allow-list p1,p2");
    r.opts["follow-forks"] = r.app->add_flag("--follow-forks", f.follow_forks, "admit children of allowed pids");
    r.opts["user-events"] = r.app->add_option("--user-events", f.user_events, "events to tally e1,e2");
    r.opts["strict"] = r.app->add_flag("--strict", f.strict, "fail on the first malformed line");
    r.opts["merged"] = r.app->add_flag("--merged", f.merged, "single pre-merged input");
    r.opts["width"] = r.app->add_option("--width", f.width, "render width");
    r.opts["inputs"] = r.app->add_option("inputs", f.inputs, "per-CPU trace files");
    subs.push_back(r);
  }
  {
    auto r = add_common(app.add_subcommand("synth", "generate a synthetic workload"), f);
    r.opts["topology"] = r.app->add_option("--topology", f.topology, "topology JSON file or 'random'");
    r.opts["requests"] = r.app->add_option("--requests", f.requests, "external requests");
    r.opts["cpus"] = r.app->add_option("--cpus", f.cpus, "simulated CPUs");
    r.opts["fault"] = r.app->add_option("--fault", f.fault,
                                        "none|drop-user-events|drop-structural|truncate|orphan-probes");
    r.opts["fault-p"] = r.app->add_option("--fault-p", f.fault_p, "fault probability");
    r.opts["fault-at"] = r.app->add_option("--fault-at", f.fault_at, "truncate timestamp (ns)");
    subs.push_back(r);
  }
  {
    auto r = add_common(app.add_subcommand("diff", "compare DAGs with ground truth"), f);
    r.opts["truth"] = r.app->add_option("--truth", f.truth, "ground_truth.json");
    r.opts["dags"] = r.app->add_option("--dags", f.dags, "reconstruct output directory");
    subs.push_back(r);
  }
  {
    auto r = add_common(app.add_subcommand("render", "text Gantt chart of one DAG"), f);
    r.opts["dag"] = r.app->add_option("--dag", f.dag, "trace JSON file");
    r.opts["width"] = r.app->add_option("--width", f.width, "columns, at least 40");
    subs.push_back(r);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kreqtrace::kExitOk : kreqtrace::kExitConfig;
  }

  for (const auto& r : subs) {
    if (!r.app->parsed()) continue;
    RunConfig config;
    config.subcommand = r.app->get_name();
    try {
      if (r.given("config")) kreqtrace::load_config_file(config, f.config);
      apply_flags(r, f, config);
    } catch (const kreqtrace::ConfigError& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kreqtrace::kExitConfig;
    }
    try {
      return kreqtrace::run(config);
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kreqtrace::kExitFailure;
    }
  }
  return kreqtrace::kExitConfig;
}
