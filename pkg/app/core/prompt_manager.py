"""
Менеджер промптов - шаблоны стадий и рендеринг в сообщения чата
"""

import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional

from jinja2 import Environment, FileSystemLoader, StrictUndefined, TemplateError, meta

from .models import ChatMessage, FrozenModel, Role, StageTag
from .stage_parsers import GRAMMARS, escape

# Сырые тексты экранируются; блоки уже сериализованы stage_parsers
RAW_PLACEHOLDERS = {"query", "chain", "answer"}
BLOCK_PLACEHOLDERS = {"claims_block", "queries_block", "evidence_block", "retrieved_docs"}
GRAMMAR_VARIABLE = "grammar"

# Шаблоны лежат внутри пакета и ставятся вместе с ним (package_data)
DEFAULT_PROMPTS_DIR = Path(__file__).parent.parent / "prompts"


class TemplateRenderError(Exception):
    """Шаблон не найден, неполон или не получил нужную подстановку"""

    def __init__(self, message: str, placeholder: Optional[str] = None):
        super().__init__(message)
        self.placeholder = placeholder


class StageTemplate(FrozenModel):
    stage_tag: StageTag
    system_text: str
    user_template: str
    placeholders: List[str]


class PromptManager:
    """Загружает по одному шаблону на стадию и рендерит [system, user]"""

    def __init__(self, prompts_dir: Optional[str] = None):
        self.logger = logging.getLogger(__name__)

        if prompts_dir is None:
            self.prompts_dir = DEFAULT_PROMPTS_DIR
        else:
            # Относительный путь - от текущего каталога
            self.prompts_dir = Path(prompts_dir).resolve()

        self.env = Environment(
            loader=FileSystemLoader(str(self.prompts_dir)),
            undefined=StrictUndefined,
            trim_blocks=True,
            lstrip_blocks=True,
            keep_trailing_newline=False,
            autoescape=False,
        )

        self.templates: Dict[StageTag, StageTemplate] = {}
        self._compiled = {}
        for stage_tag in StageTag:
            self._load(stage_tag)

        self.logger.info(f"Prompts directory: {self.prompts_dir} ({len(self.templates)} templates)")

    def _load(self, stage_tag: StageTag) -> None:
        name = f"{stage_tag.value}.jinja2"
        try:
            source, _, _ = self.env.loader.get_source(self.env, name)
            template = self.env.get_template(name)
        except TemplateError as e:
            raise TemplateRenderError(f"cannot load template {name} from {self.prompts_dir}: {e}") from e

        missing_blocks = {"system", "user"} - set(template.blocks)
        if missing_blocks:
            raise TemplateRenderError(f"template {name} lacks blocks: {', '.join(sorted(missing_blocks))}")

        variables = meta.find_undeclared_variables(self.env.parse(source))
        if GRAMMAR_VARIABLE not in variables:
            raise TemplateRenderError(f"template {name} does not include the {{{{ {GRAMMAR_VARIABLE} }}}} instructions")

        system_text = self._render_block(template, "system", {GRAMMAR_VARIABLE: GRAMMARS[stage_tag]}, name)

        self._compiled[stage_tag] = template
        self.templates[stage_tag] = StageTemplate(
            stage_tag=stage_tag,
            system_text=system_text,
            user_template=source,
            placeholders=sorted(variables - {GRAMMAR_VARIABLE}),
        )

    @staticmethod
    def _render_block(template, block: str, context: Mapping[str, str], name: str) -> str:
        try:
            return "".join(template.blocks[block](template.new_context(dict(context)))).strip()
        except TemplateError as e:
            raise TemplateRenderError(f"error rendering {block} block of {name}: {e}") from e

    def render(self, stage_tag, context: Mapping[str, str]) -> List[ChatMessage]:
        """
        Рендерит промпт стадии

        Args:
            stage_tag: тег стадии
            context: значения плейсхолдеров (query, chain, answer, *_block, retrieved_docs)

        Returns:
            [system, user] сообщения
        """
        try:
            stage_tag = StageTag(stage_tag)
        except ValueError:
            raise TemplateRenderError(f"unknown stage tag: {stage_tag!r}")

        template = self.templates[stage_tag]
        for placeholder in template.placeholders:
            if placeholder not in context:
                raise TemplateRenderError(
                    f"missing placeholder {placeholder!r} for stage {stage_tag.value}", placeholder
                )

        values = {
            key: escape(value) if key in RAW_PLACEHOLDERS else value
            for key, value in context.items()
        }
        values[GRAMMAR_VARIABLE] = GRAMMARS[stage_tag]

        compiled = self._compiled[stage_tag]
        name = f"{stage_tag.value}.jinja2"
        system = self._render_block(compiled, "system", values, name)
        user = self._render_block(compiled, "user", values, name)

        self.logger.debug(f"Rendered template '{name}' ({len(system) + len(user)} chars)")
        return [ChatMessage(role=Role.SYSTEM, content=system), ChatMessage(role=Role.USER, content=user)]


def default_templates() -> Dict[StageTag, StageTemplate]:
    """Шесть встроенных шаблонов"""
    return dict(PromptManager().templates)
