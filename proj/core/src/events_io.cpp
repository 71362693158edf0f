#include "evtrack/event.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace evtrack {

EventStream read_event_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("read_event_csv: cannot open " + path);
  EventStream stream;
  std::string line;
  if (!std::getline(in, line)) {
    throw InputError("read_event_csv: " + path + " is empty");
  }
  std::size_t h = 0, w = 0;
  if (std::sscanf(line.c_str(), "#H=%zu W=%zu", &h, &w) != 2) {
    throw InputError("read_event_csv: " + path +
                     " missing '#H=<int> W=<int>' header");
  }
  stream.height = h;
  stream.width = w;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    long long t = 0;
    unsigned x = 0, y = 0;
    int p = 0;
    if (std::sscanf(line.c_str(), "%lld,%u,%u,%d", &t, &x, &y, &p) != 4 ||
        (p != 1 && p != -1)) {
      throw InputError("read_event_csv: " + path + ":" +
                       std::to_string(line_no) + ": bad event line '" + line +
                       "'");
    }
    stream.events.push_back(Event{t, static_cast<std::uint16_t>(x),
                                  static_cast<std::uint16_t>(y),
                                  static_cast<std::int8_t>(p)});
  }
  return stream;
}

void write_event_csv(const std::string& path, const EventStream& stream) {
  std::ofstream out(path);
  if (!out) throw InputError("write_event_csv: cannot open " + path);
  out << "#H=" << stream.height << " W=" << stream.width << "\n";
  for (const Event& e : stream.events) {
    out << e.t_us << "," << e.x << "," << e.y << "," << int(e.p) << "\n";
  }
  if (!out) throw InputError("write_event_csv: short write to " + path);
}

}  // namespace evtrack
