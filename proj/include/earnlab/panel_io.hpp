#pragma once

// Panel CSV: id,birth_year,year,age,earnings,c_1..c_K,d_1..d_L,m_1..m_{K+L}
// with a mandatory header row; reals printed at 17 significant digits.

#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "earnlab/panel.hpp"

namespace earnlab {

inline void write_panel_csv(std::ostream& out, const Panel& panel) {
  std::size_t k_cont = 0;
  std::size_t k_cat = 0;
  for (const auto& h : panel) {
    if (!h.records.empty()) {
      k_cont = h.records.front().continuous.size();
      k_cat = h.records.front().categoricals.size();
      break;
    }
  }
  out << "id,birth_year,year,age,earnings";
  for (std::size_t k = 1; k <= k_cont; ++k) out << ",c_" << k;
  for (std::size_t k = 1; k <= k_cat; ++k) out << ",d_" << k;
  for (std::size_t k = 1; k <= k_cont + k_cat; ++k) out << ",m_" << k;
  out << '\n';
  for (const auto& h : panel) {
    for (const auto& r : h.records) {
      require(r.continuous.size() == k_cont && r.categoricals.size() == k_cat, ErrorKind::Schema,
              "panel rows have inconsistent feature counts");
      out << h.id << ',' << h.birth_year << ',' << r.year << ',' << r.age << ',' << fmt17(r.earnings);
      for (double c : r.continuous) out << ',' << fmt17(c);
      for (int d : r.categoricals) out << ',' << d;
      for (auto m : r.missing) out << ',' << static_cast<int>(m);
      out << '\n';
    }
  }
}

inline std::string panel_to_csv(const Panel& panel) {
  std::ostringstream os;
  write_panel_csv(os, panel);
  return os.str();
}

/// Rows of one id must be contiguous. conditioning_len is not part of the
/// file and is set to `conditioning_len` on every history.
inline Panel read_panel_csv(std::istream& in, int conditioning_len = 10) {
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorKind::Io, "panel CSV is missing its header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  require(header.size() >= 5 && header[0] == "id" && header[1] == "birth_year" && header[2] == "year" &&
              header[3] == "age" && header[4] == "earnings",
          ErrorKind::Io, "unexpected panel CSV header");
  std::size_t k_cont = 0;
  std::size_t k_cat = 0;
  std::size_t k_mask = 0;
  for (std::size_t j = 5; j < header.size(); ++j) {
    if (header[j].rfind("c_", 0) == 0) ++k_cont;
    else if (header[j].rfind("d_", 0) == 0) ++k_cat;
    else if (header[j].rfind("m_", 0) == 0) ++k_mask;
    else throw Error(ErrorKind::Io, "unknown panel column " + header[j]);
  }
  require(k_mask == k_cont + k_cat, ErrorKind::Io, "mask column count must equal c + d columns");

  Panel panel;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    require(cells.size() == header.size(), ErrorKind::Io, "wrong column count on line " + std::to_string(line_no));
    try {
      const std::int64_t id = std::stoll(cells[0]);
      const int birth = std::stoi(cells[1]);
      if (panel.empty() || panel.back().id != id) {
        IndividualHistory h;
        h.id = id;
        h.birth_year = birth;
        h.conditioning_len = conditioning_len;
        panel.push_back(std::move(h));
      }
      AnnualRecord r;
      r.year = std::stoi(cells[2]);
      r.age = std::stoi(cells[3]);
      r.earnings = std::stod(cells[4]);
      std::size_t j = 5;
      for (std::size_t k = 0; k < k_cont; ++k) r.continuous.push_back(std::stod(cells[j++]));
      for (std::size_t k = 0; k < k_cat; ++k) r.categoricals.push_back(std::stoi(cells[j++]));
      for (std::size_t k = 0; k < k_mask; ++k) r.missing.push_back(static_cast<std::uint8_t>(std::stoi(cells[j++]) != 0));
      panel.back().records.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw Error(ErrorKind::Io, "unparsable value on line " + std::to_string(line_no));
    }
  }
  for (const auto& h : panel) h.validate();
  return panel;
}

}  // namespace earnlab
