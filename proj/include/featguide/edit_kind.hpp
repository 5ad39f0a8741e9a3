#pragma once

#include <string>
#include <string_view>

namespace featguide {

enum class EditKind { moving, resizing, replacing, pasting, dragging };

std::string_view to_string(EditKind kind);
/// Throws ContractError for unknown names.
EditKind edit_kind_from(std::string_view name);

/// Replacing and pasting read a second (reference) image.
constexpr bool needs_reference(EditKind kind) {
  return kind == EditKind::replacing || kind == EditKind::pasting;
}

}  // namespace featguide
